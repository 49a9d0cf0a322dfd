"""
history.py — Per-round metrics records and validation-based model selection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from config import METRICS_SCHEMA
from errors import SchemaVersionError


def _finite_or_none(value: float | None) -> float | None:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return None
    return value


@dataclass
class ClientRoundMetrics:
    client_id: int
    domain: int
    train_loss: float | None
    con_loss: float | None
    val_acc: float | None
    test_acc: float | None
    skipped: bool = False
    con_layers: list[float] | None = None     # regularizer value per block, shallowest first


@dataclass
class RoundMetrics:
    """One line of metrics.jsonl. Round 0 is the initial model before any training."""
    round: int
    lr: float
    clients: list[ClientRoundMetrics] = field(default_factory=list)
    val_all: float = 0.0
    val_avg: float = 0.0
    test_all: float = 0.0
    test_avg: float = 0.0
    min_dot: float | None = None
    schema: int = METRICS_SCHEMA

    def to_dict(self) -> dict:
        record = asdict(self)
        for client in record["clients"]:
            for key in ("train_loss", "con_loss", "val_acc", "test_acc"):
                client[key] = _finite_or_none(client[key])
            if client["con_layers"] is not None:
                client["con_layers"] = [_finite_or_none(v) for v in client["con_layers"]]
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "RoundMetrics":
        if record.get("schema") != METRICS_SCHEMA:
            raise SchemaVersionError(
                f"metrics schema {record.get('schema')!r} is not the supported version {METRICS_SCHEMA}"
            )
        record = dict(record)
        record["clients"] = [ClientRoundMetrics(**c) for c in record.get("clients", [])]
        return cls(**record)


class RoundHistory:
    """Ordered round records; the selected round is the one with the best validation AVG."""

    def __init__(self) -> None:
        self.rounds: list[RoundMetrics] = []
        self._best: int | None = None

    # ── Recording ───────────────────────────────────────────────────────

    def add(self, metrics: RoundMetrics) -> bool:
        """Append a round; returns True when it becomes the selected round (ties keep the earlier one)."""
        if self.rounds and metrics.round <= self.rounds[-1].round:
            raise ValueError(f"round {metrics.round} after round {self.rounds[-1].round}")
        self.rounds.append(metrics)
        best = self.best()
        if best is None or metrics.val_avg > best.val_avg:
            self._best = len(self.rounds) - 1
            return True
        return False

    # ── Querying ────────────────────────────────────────────────────────

    def best(self) -> RoundMetrics | None:
        return None if self._best is None else self.rounds[self._best]

    def last(self) -> RoundMetrics | None:
        return self.rounds[-1] if self.rounds else None

    def __len__(self) -> int:
        return len(self.rounds)

    def truncate(self, last_round: int) -> None:
        """Drop every record after ``last_round`` (used when resuming from a checkpoint)."""
        kept = [m for m in self.rounds if m.round <= last_round]
        self.rounds = []
        self._best = None
        for m in kept:
            self.add(m)
