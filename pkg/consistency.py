"""
consistency.py — Consistency regularizer pulling local feature statistics toward the global ones.

For each block with a DSE module, the statistics entering BN_DFE are compared
with the global model's BN_DFE running statistics. The local estimate is the
running recursion ``momentum * prior + (1 - momentum) * batch``; only the
batch term carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

import functional as F
from config import BETA, BN_MOMENTUM, LAMBDA
from dse_block import BatchStats
from errors import ConfigError, DimensionError, EmptyLayerError
from tensor import Tensor, as_tensor


@dataclass
class LayerStatSnapshot:
    layer: int
    mean: Tensor
    var: Tensor
    global_mean: np.ndarray
    global_var: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.global_mean.size)

    def validate(self) -> None:
        sizes = {self.mean.size, self.var.size, self.global_mean.size, self.global_var.size}
        if len(sizes) != 1:
            raise DimensionError(f"layer {self.layer}: statistic vectors disagree in length {sorted(sizes)}")
        if np.any(self.var.data < 0) or np.any(self.global_var < 0):
            raise DimensionError(f"layer {self.layer}: negative variance")


@dataclass(frozen=True)
class RegularizerConfig:
    layers: int
    lam: float = LAMBDA
    beta: float = BETA
    momentum: float = BN_MOMENTUM

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.layers < 1:
            raise ConfigError(f"regularizer needs at least one layer, got {self.layers}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def layer_con_loss(snapshot: LayerStatSnapshot) -> Tensor:
    """``|mu - mu_g|^2 / d + ((|var|_1 - |var_g|_1) / d)^2`` for one layer."""
    d = snapshot.dim
    if d == 0:
        raise EmptyLayerError(f"layer {snapshot.layer} has no channels")
    snapshot.validate()
    diff = snapshot.mean - as_tensor(snapshot.global_mean)
    mean_term = (diff * diff).sum() * (1.0 / d)
    spread = (snapshot.var.sum() - float(np.sum(snapshot.global_var, dtype=np.float64))) * (1.0 / d)
    return mean_term + spread * spread


def depth_weights(layers: int, beta: float) -> np.ndarray:
    """Softmax of ``beta * l`` over layers ``l = 1..L``."""
    if layers < 1:
        raise ConfigError(f"depth weights need L >= 1, got {layers}")
    return F.softmax(beta * np.arange(1, layers + 1, dtype=np.float64))


def layer_con_losses(snapshots: Sequence[LayerStatSnapshot], cfg: RegularizerConfig) -> list[Tensor]:
    """Unweighted per-layer losses, shallowest block first."""
    cfg.validate()
    if len(snapshots) != cfg.layers:
        raise ConfigError(f"expected {cfg.layers} layer snapshots, got {len(snapshots)}")
    return [layer_con_loss(snapshot) for snapshot in snapshots]


def weighted_con_loss(terms: Sequence[Tensor], beta: float = BETA) -> Tensor:
    """Depth-weighted sum of per-layer losses."""
    total = None
    for w, term in zip(depth_weights(len(terms), beta), terms):
        term = term * float(w)
        total = term if total is None else total + term
    return total


def total_con_loss(snapshots: Sequence[LayerStatSnapshot], cfg: RegularizerConfig) -> Tensor:
    return weighted_con_loss(layer_con_losses(snapshots, cfg), cfg.beta)


def running_snapshot(
    layer: int,
    batch_mean: Tensor,
    batch_var: Tensor,
    prior_mean: np.ndarray,
    prior_var: np.ndarray,
    global_mean: np.ndarray,
    global_var: np.ndarray,
    momentum: float = BN_MOMENTUM,
) -> LayerStatSnapshot:
    """Snapshot whose local estimate is the running recursion after this batch."""
    mean = batch_mean * (1.0 - momentum) + momentum * np.asarray(prior_mean)
    var = batch_var * (1.0 - momentum) + momentum * np.asarray(prior_var)
    return LayerStatSnapshot(layer, mean, var, np.asarray(global_mean), np.asarray(global_var))


def snapshots_from_stats(
    stats: Sequence[BatchStats],
    global_stats: Sequence[tuple[np.ndarray, np.ndarray]],
    momentum: float = BN_MOMENTUM,
) -> list[LayerStatSnapshot]:
    """Pair each block's batch statistics with the global reference of the same block."""
    if len(stats) != len(global_stats):
        raise ConfigError(f"{len(stats)} regularized blocks but {len(global_stats)} global references")
    return [
        running_snapshot(l, s.mean, s.var, s.prior_mean, s.prior_var, g_mean, g_var, momentum)
        for l, (s, (g_mean, g_var)) in enumerate(zip(stats, global_stats), start=1)
    ]
