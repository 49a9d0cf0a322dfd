"""
run_recorder.py — Run directory persistence: config, metrics stream, aggregation reports, summary.
"""

from __future__ import annotations

import json
import logging
import os
from typing import Any

import experiment_config
from config import (
    AGGREGATION_FILE,
    BEST_DIR,
    CHECKPOINT_DIR,
    CONFIG_FILE,
    METRICS_FILE,
    OUTPUT_ROOT_ENV,
    SUMMARY_FILE,
)
from errors import DataFormatError, OutputExistsError
from history import RoundMetrics

logger = logging.getLogger(__name__)


def resolve_output(path: str) -> str:
    """Relative paths are placed under $FDSE_OUTPUT_ROOT when it is set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def prepare_directory(path: str, force: bool = False) -> None:
    """Create ``path``; refuse a non-empty one unless ``force``."""
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise OutputExistsError(f"{path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def read_jsonl(path: str) -> list[dict[str, Any]]:
    records = []
    try:
        with open(path, "r") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"{path}:{lineno}:{exc.colno}: malformed record ({exc.msg})") from None
    except FileNotFoundError:
        raise DataFormatError(f"{path}: not found") from None
    return records


class RunRecorder:
    """Writes everything a training run leaves behind in its directory."""

    def __init__(self, run_dir: str) -> None:
        self.run_dir = run_dir

    # ── Paths ───────────────────────────────────────────────────────────

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def checkpoint_dir(self, round_index: int) -> str:
        return os.path.join(self.run_dir, CHECKPOINT_DIR, f"round_{round_index}")

    @property
    def best_dir(self) -> str:
        return self.path(BEST_DIR)

    def latest_checkpoint(self) -> str | None:
        root = self.path(CHECKPOINT_DIR)
        if not os.path.isdir(root):
            return None
        rounds = sorted(
            int(name.split("_", 1)[1]) for name in os.listdir(root)
            if name.startswith("round_") and name.split("_", 1)[1].isdigit()
        )
        return self.checkpoint_dir(rounds[-1]) if rounds else None

    # ── Config ──────────────────────────────────────────────────────────

    def write_config(self, resolved: dict[str, Any], name: str = CONFIG_FILE) -> None:
        experiment_config.write(resolved, self.path(name))

    # ── Streams ─────────────────────────────────────────────────────────

    def reset_streams(self, keep_through: int | None = None) -> None:
        """Truncate the metric and report streams to rounds ``<= keep_through`` (all when None)."""
        for name in (METRICS_FILE, AGGREGATION_FILE):
            path = self.path(name)
            if keep_through is None or not os.path.exists(path):
                if os.path.exists(path):
                    os.remove(path)
                continue
            kept = [r for r in read_jsonl(path) if r.get("round", 0) <= keep_through]
            with open(path, "w") as f:
                for record in kept:
                    f.write(json.dumps(record, sort_keys=True) + "\n")

    def _append(self, name: str, record: dict[str, Any]) -> None:
        with open(self.path(name), "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def append_metrics(self, metrics: RoundMetrics) -> None:
        self._append(METRICS_FILE, metrics.to_dict())

    def append_aggregation(self, report: dict[str, Any]) -> None:
        self._append(AGGREGATION_FILE, report)

    def read_metrics(self) -> list[RoundMetrics]:
        return [RoundMetrics.from_dict(r) for r in read_jsonl(self.path(METRICS_FILE))]

    # ── Summary ─────────────────────────────────────────────────────────

    def write_json(self, name: str, payload: dict[str, Any]) -> None:
        with open(self.path(name), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    def write_summary(self, summary: dict[str, Any]) -> None:
        self.write_json(SUMMARY_FILE, summary)
        logger.info(f"Summary written to {self.path(SUMMARY_FILE)}")

    def read_summary(self) -> dict[str, Any]:
        path = self.path(SUMMARY_FILE)
        try:
            with open(path, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            raise DataFormatError(f"{path}: run has no summary") from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:{exc.lineno}:{exc.colno}: malformed summary ({exc.msg})") from None
