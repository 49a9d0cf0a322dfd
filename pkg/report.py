"""
report.py — Comparison table across run directories and per-domain series for plotting.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Sequence

from config import BUNDLE_FORMAT, REPORT_FILE, SERIES_FILE
from errors import SchemaVersionError
from history import RoundMetrics
from run_recorder import RunRecorder

SERIES_COLUMNS = ("run", "method", "seed", "round", "domain", "val_acc", "test_acc")


@dataclass
class RunRecord:
    path: str
    summary: dict
    metrics: list[RoundMetrics]

    @property
    def name(self) -> str:
        return os.path.basename(os.path.normpath(self.path))


def load_run(path: str) -> RunRecord:
    recorder = RunRecorder(path)
    summary = recorder.read_summary()
    if summary.get("format") != BUNDLE_FORMAT:
        raise SchemaVersionError(f"{path}: summary format {summary.get('format')!r} is not {BUNDLE_FORMAT}")
    return RunRecord(path, summary, recorder.read_metrics())


def comparison_rows(runs: Sequence[RunRecord]) -> list[dict]:
    """One row per run: selected round (best validation AVG) with ALL/AVG and per-domain test accuracy."""
    rows = []
    for run in runs:
        best = run.summary.get("best") or {}
        rows.append({
            "run": run.name,
            "method": run.summary.get("method"),
            "seed": run.summary.get("seed"),
            "round": best.get("round"),
            "test_all": best.get("test_all"),
            "test_avg": best.get("test_avg"),
            "per_domain": best.get("per_domain", {}),
        })
    return rows


def per_domain_series(runs: Sequence[RunRecord]) -> list[dict]:
    series = []
    for run in runs:
        for m in run.metrics:
            for c in m.clients:
                series.append({
                    "run": run.name,
                    "method": run.summary.get("method"),
                    "seed": run.summary.get("seed"),
                    "round": m.round,
                    "domain": c.domain,
                    "val_acc": c.val_acc,
                    "test_acc": c.test_acc,
                })
    return series


def format_table(rows: Sequence[dict]) -> str:
    domains = sorted({d for row in rows for d in row["per_domain"]}, key=int)
    header = ["run", "method", "seed", "round", "ALL", "AVG"] + [f"D{d}" for d in domains]

    def cell(value) -> str:
        return f"{value:.2f}" if isinstance(value, float) else ("-" if value is None else str(value))

    lines = [[cell(r["run"]), cell(r["method"]), cell(r["seed"]), cell(r["round"]),
              cell(r["test_all"]), cell(r["test_avg"])] + [cell(r["per_domain"].get(d)) for d in domains]
             for r in rows]
    widths = [max([len(h)] + [len(line[i]) for line in lines]) for i, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    out.append("  ".join("-" * w for w in widths))
    out.extend("  ".join(v.ljust(w) for v, w in zip(line, widths)) for line in lines)
    return "\n".join(out)


def write_report(directory: str, rows: Sequence[dict], series: Sequence[dict]) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, REPORT_FILE), "w") as f:
        json.dump({"format": BUNDLE_FORMAT, "rows": list(rows)}, f, indent=2, sort_keys=True)
    with open(os.path.join(directory, SERIES_FILE), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SERIES_COLUMNS)
        writer.writeheader()
        writer.writerows(series)
