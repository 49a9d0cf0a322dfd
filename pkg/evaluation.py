"""
evaluation.py — Eval-mode accuracy per client and the ALL / AVG summaries (in percent).

ALL is the accuracy over the pooled test samples of every client; AVG is the
mean of the per-client accuracies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from config import BATCH_SIZE
from model import DecomposedModel
from synthetic_domains import DataSplit
from tensor import no_grad


@dataclass
class EvalResult:
    all: float
    avg: float
    per_client: list[float]
    correct: list[int]
    totals: list[int]

    def to_dict(self) -> dict:
        return {"all": self.all, "avg": self.avg, "per_client": self.per_client}


def count_correct(model: DecomposedModel, split: DataSplit, batch_size: int = BATCH_SIZE) -> int:
    correct = 0
    with no_grad():
        for start in range(0, len(split), batch_size):
            logits = model.forward(split.features[start:start + batch_size], mode="eval")
            correct += int(np.sum(np.argmax(logits.data, axis=1) == split.labels[start:start + batch_size]))
    return correct


def summarize(correct: Sequence[int], totals: Sequence[int]) -> EvalResult:
    """ALL and AVG from per-client counts; clients without samples are left out of AVG."""
    per_client = [100.0 * c / t if t else float("nan") for c, t in zip(correct, totals)]
    total = sum(totals)
    scored = [acc for acc, t in zip(per_client, totals) if t]
    return EvalResult(
        all=100.0 * sum(correct) / total if total else 0.0,
        avg=float(np.mean(scored)) if scored else 0.0,
        per_client=per_client,
        correct=list(correct),
        totals=list(totals),
    )


def evaluate(models: Sequence[DecomposedModel], splits: Sequence[DataSplit],
             batch_size: int = BATCH_SIZE) -> EvalResult:
    """Client ``k``'s model on client ``k``'s split, argmax prediction."""
    correct = [count_correct(m, s, batch_size) for m, s in zip(models, splits)]
    return summarize(correct, [len(s) for s in splits])
