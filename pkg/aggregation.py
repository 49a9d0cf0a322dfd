"""
aggregation.py — Server-side combination rules.

* consensus: per layer, the min-norm convex combination of the clients'
  unit-normalized updates (pairwise Frank–Wolfe on the simplex), rescaled by
  the mean update norm. The result never points against any client's update.
* attention: each client receives ``softmax(Q Q^T / tau) V`` over the
  clients' flattened parameters, ``Q`` being the row-normalized ``V``.
* BN statistics: averaged ones are replaced by the unweighted client mean,
  local ones stay with their owner.
* weighted_average: the FedAvg data-size-weighted mean.

All arithmetic runs in float64; results are cast back to the input dtype.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

import functional as F
from config import (
    CONFLICT_TOL,
    CONSENSUS_GRANULARITY,
    EXACT_SOLVER_MAX_CLIENTS,
    FW_CONFLICT_SLACK,
    FW_GAP_TOL,
    FW_MAX_ITER,
    FW_RETRY_ITER,
    TAU,
    UNIT_NORM_TOL,
    ZERO_COMBINATION_SQ,
    ZERO_UPDATE_NORM,
)
from errors import AggregationError, AlignmentError, ConfigError, NoClientsError
from utils import flatten_arrays, unflatten_like

logger = logging.getLogger(__name__)

GRANULARITIES = ("layer", "model")


# ── Types ───────────────────────────────────────────────────────────────────

@dataclass
class LayerUpdateSet:
    """One layer's flattened client updates and their norms."""
    name: str
    updates: np.ndarray        # [N, dim]
    norms: np.ndarray          # [N]

    @classmethod
    def from_updates(cls, name: str, updates: Sequence[np.ndarray]) -> "LayerUpdateSet":
        if not len(updates):
            raise NoClientsError(f"{name}: no client updates")
        sizes = {np.size(u) for u in updates}
        if len(sizes) != 1:
            raise AlignmentError(f"{name}: client updates differ in length {sorted(sizes)}")
        matrix = np.stack([np.asarray(u, dtype=np.float64).reshape(-1) for u in updates])
        return cls(name, matrix, np.sqrt(np.einsum("ij,ij->i", matrix, matrix)))

    def validate(self) -> None:
        recomputed = np.sqrt(np.einsum("ij,ij->i", self.updates, self.updates))
        if self.norms.shape != (len(self.updates),) or np.any(np.abs(recomputed - self.norms) > 1e-6):
            raise AlignmentError(f"{self.name}: stored norms disagree with the updates")


@dataclass(frozen=True)
class SimplexWeights:
    u: np.ndarray

    def validate(self) -> None:
        if np.any(self.u < 0) or abs(float(self.u.sum()) - 1.0) > 1e-7:
            raise AggregationError(f"weights {self.u} are not on the probability simplex")


@dataclass
class MinNormResult:
    weights: SimplexWeights
    objective: float           # |sum_k u_k d_k|^2
    gap: float
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list)
    solver: str = "frank_wolfe"

    @property
    def lower_bound(self) -> float:
        """No point of the simplex has a smaller objective than this."""
        return max(self.objective - self.gap, 0.0)


@dataclass
class AttentionMatrix:
    matrix: np.ndarray         # [N, N], row-stochastic
    tau: float
    zero_rows: list[int] = field(default_factory=list)

    def validate(self) -> None:
        rows = self.matrix.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6) or np.any(self.matrix < 0) or np.any(self.matrix > 1):
            raise AggregationError("attention matrix is not row-stochastic")


@dataclass
class LayerReport:
    name: str
    weights: list[float]               # per client, 0 for excluded ones
    included: list[bool]
    mean_norm: float
    objective: float
    iterations: int
    gap: float
    converged: bool
    dots: list[float]                  # normalized dot(aggregate, client update)
    pairwise_dots: list[list[float]] = field(default_factory=list)   # normalized, before aggregation
    solver: str = "frank_wolfe"
    zero_update: bool = False
    null_consensus: bool = False

    def min_dot(self) -> float:
        values = [d for d, inc in zip(self.dots, self.included) if inc]
        return min(values) if values else 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "weights": self.weights,
            "included": self.included,
            "mean_norm": self.mean_norm,
            "objective": self.objective,
            "iterations": self.iterations,
            "gap": self.gap,
            "converged": self.converged,
            "dots": self.dots,
            "pairwise_dots": self.pairwise_dots,
            "solver": self.solver,
            "zero_update": self.zero_update,
            "null_consensus": self.null_consensus,
        }


@dataclass
class AggregationReport:
    round: int
    layers: list[LayerReport] = field(default_factory=list)
    attention: dict[str, AttentionMatrix] = field(default_factory=dict)

    def min_dot(self) -> float:
        return min((layer.min_dot() for layer in self.layers), default=0.0)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "min_dot": self.min_dot(),
            "layers": [layer.to_dict() for layer in self.layers],
            "attention": {
                name: {"tau": a.tau, "matrix": a.matrix.tolist(), "zero_rows": a.zero_rows}
                for name, a in self.attention.items()
            },
        }


# ── Min-norm solver ─────────────────────────────────────────────────────────

def _two_point(gram: np.ndarray) -> np.ndarray:
    """Closed form for N = 2: u_1 = ((d2 - d1) . d2) / |d1 - d2|^2, clipped to [0, 1]."""
    denom = gram[0, 0] + gram[1, 1] - 2.0 * gram[0, 1]
    if denom <= 0.0:
        return np.array([0.5, 0.5])
    u1 = float(np.clip((gram[1, 1] - gram[0, 1]) / denom, 0.0, 1.0))
    return np.array([u1, 1.0 - u1])


def _unit_directions(directions: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    if len(directions) == 0:
        raise NoClientsError("min-norm problem over an empty set of directions")
    d = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in directions])
    norms = np.sqrt(np.einsum("ij,ij->i", d, d))
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise AggregationError(f"directions must be unit vectors, norms are {norms.tolist()}")
    return d


def _duality_gap(gram: np.ndarray, u: np.ndarray) -> float:
    grad = gram @ u
    return max(2.0 * float(u @ grad - grad.min()), 0.0)


def min_norm_weights(
    directions: Sequence[np.ndarray] | np.ndarray,
    max_iter: int = FW_MAX_ITER,
    gap_tol: float = FW_GAP_TOL,
    start: np.ndarray | None = None,
) -> MinNormResult:
    """Minimize ``|sum_k u_k d_k|^2`` over the simplex, starting from uniform weights (or ``start``).

    Pairwise Frank–Wolfe with exact line search: each step moves mass from the
    worst active vertex to the best vertex. Stops when the duality gap is below
    ``gap_tol`` and small relative to the current combination's norm.
    """
    d = _unit_directions(directions)
    n = len(d)
    gram = d @ d.T
    if n == 1:
        return MinNormResult(SimplexWeights(np.ones(1)), float(gram[0, 0]), 0.0, 0, True, [float(gram[0, 0])])
    if n == 2:
        u = _two_point(gram)
        value = float(u @ gram @ u)
        return MinNormResult(SimplexWeights(u), value, 0.0, 0, True, [value])

    u = np.full(n, 1.0 / n) if start is None else np.array(start, dtype=np.float64)
    value = float(u @ gram @ u)
    trace = [value]
    gap = np.inf
    iterations = 0
    converged = False
    while iterations < max_iter:
        grad = gram @ u
        toward = int(np.argmin(grad))
        active = np.flatnonzero(u > 0)
        away = int(active[np.argmax(grad[active])])
        gap = 2.0 * float(u @ grad - grad[toward])
        if gap <= gap_tol and (value <= ZERO_COMBINATION_SQ or gap <= FW_CONFLICT_SLACK * np.sqrt(value)):
            converged = True
            break
        if toward == away:
            converged = True
            break

        slope = grad[toward] - grad[away]
        curvature = gram[toward, toward] + gram[away, away] - 2.0 * gram[toward, away]
        limit = u[away]
        step = limit if curvature <= 0.0 else min(limit, max(0.0, -slope / curvature))
        if step <= 0.0:
            converged = True
            break
        u[toward] += step
        u[away] = 0.0 if step == limit else u[away] - step
        iterations += 1

        value = float(u @ gram @ u)
        trace.append(value)

    u = np.clip(u, 0.0, None)
    u /= u.sum()
    if not converged:
        gap = _duality_gap(gram, u)
        logger.debug(f"Frank–Wolfe stopped at {max_iter} iterations (gap {gap:.3e})")
    return MinNormResult(SimplexWeights(u), float(u @ gram @ u), max(gap, 0.0), iterations, converged, trace)


def active_set_min_norm(directions: Sequence[np.ndarray] | np.ndarray) -> MinNormResult:
    """Exact minimizer by enumerating supports.

    On each support the equality-constrained minimizer solves the KKT system
    ``[G_S 1; 1^T 0] [u; -nu] = [0; 1]``; the best solution with ``u >= 0`` is
    the global one. Cost grows as ``2^N``, so it is meant for a handful of clients.
    """
    d = _unit_directions(directions)
    n = len(d)
    gram = d @ d.T
    best_u, best_value, tried = None, np.inf, 0
    for size in range(1, n + 1):
        for support in itertools.combinations(range(n), size):
            s = list(support)
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = gram[np.ix_(s, s)]
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            tried += 1
            try:
                solution = np.linalg.solve(kkt, rhs)[:size]
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(solution)) or solution.min() < -1e-12:
                continue
            u = np.zeros(n)
            u[s] = np.clip(solution, 0.0, None)
            u /= u.sum()
            value = float(u @ gram @ u)
            if value < best_value:
                best_u, best_value = u, value
    if best_u is None:
        raise AggregationError(f"no feasible support among {tried} for {n} directions")
    return MinNormResult(SimplexWeights(best_u), best_value, _duality_gap(gram, best_u), tried, True,
                         [best_value], solver="active_set")


def settle_min_norm(directions: np.ndarray, result: MinNormResult, gap_tol: float = FW_GAP_TOL) -> MinNormResult:
    """Follow-up for a Frank–Wolfe run that hit its iteration limit.

    Few directions are re-solved exactly. Otherwise, when the gap already
    allows a zero optimum the result is returned for null consensus; failing
    that Frank–Wolfe continues from where it stopped.
    """
    if result.converged:
        return result
    if len(directions) <= EXACT_SOLVER_MAX_CLIENTS:
        return active_set_min_norm(directions)
    if result.lower_bound <= ZERO_COMBINATION_SQ:
        return result
    retry = min_norm_weights(directions, FW_RETRY_ITER, gap_tol, start=result.weights.u)
    retry.iterations += result.iterations
    return retry


# ── Consensus aggregation ───────────────────────────────────────────────────

def _normalized_dot(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def pairwise_dots(update_set: LayerUpdateSet, included: np.ndarray) -> list[list[float]]:
    """Normalized dot products between client updates; rows and columns of excluded clients are 0."""
    scale = np.where(included, update_set.norms, 1.0)
    unit = update_set.updates / scale[:, None]
    cosines = unit @ unit.T
    cosines[~included, :] = 0.0
    cosines[:, ~included] = 0.0
    return cosines.tolist()


def aggregate_shared_layer(
    update_set: LayerUpdateSet,
    max_iter: int = FW_MAX_ITER,
    gap_tol: float = FW_GAP_TOL,
) -> tuple[np.ndarray, LayerReport]:
    """Mean update norm times the min-norm combination of the included clients' directions.

    The returned update has a normalized dot product of at least ``-CONFLICT_TOL``
    with every included client's update; a combination that cannot be certified
    becomes a null consensus (zero update).
    """
    n, dim = update_set.updates.shape
    included = update_set.norms >= ZERO_UPDATE_NORM
    weights = np.zeros(n)
    report = LayerReport(update_set.name, [], included.tolist(), 0.0, 0.0, 0, 0.0, True, [0.0] * n)
    report.pairwise_dots = pairwise_dots(update_set, included)

    if not included.any():
        logger.warning(f"{update_set.name}: every client update is zero; keeping the broadcast value")
        report.weights = weights.tolist()
        report.zero_update = True
        return np.zeros(dim), report

    idx = np.flatnonzero(included)
    updates = update_set.updates[idx]
    norms = update_set.norms[idx]
    mean_norm = float(norms.mean())
    if np.all(updates == updates[0]):
        weights[idx] = 1.0 / len(idx)
        delta = updates[0].copy()
        result = MinNormResult(SimplexWeights(weights[idx]), 1.0, 0.0, 0, True, [1.0])
    else:
        directions = updates / norms[:, None]
        result = settle_min_norm(directions, min_norm_weights(directions, max_iter, gap_tol), gap_tol)
        weights[idx] = result.weights.u
        combination = result.weights.u @ directions
        cancelled = result.objective <= ZERO_COMBINATION_SQ
        if cancelled or (not result.converged and result.lower_bound <= ZERO_COMBINATION_SQ):
            logger.warning(f"{update_set.name}: client updates cancel out; no consensus direction")
            report.null_consensus = True
        else:
            worst = float((directions @ combination).min() / np.linalg.norm(combination))
            if worst < -CONFLICT_TOL:
                logger.warning(
                    f"{update_set.name}: combination opposes a client (normalized dot {worst:.3e}); "
                    f"no consensus direction"
                )
                report.null_consensus = True
        if report.null_consensus:
            combination = np.zeros(dim)
        delta = mean_norm * combination

    report.weights = weights.tolist()
    report.mean_norm = mean_norm
    report.objective = result.objective
    report.iterations = result.iterations
    report.gap = result.gap
    report.converged = result.converged
    report.solver = result.solver
    report.dots = [_normalized_dot(delta, u) if inc else 0.0 for u, inc in zip(update_set.updates, included)]
    return delta, report


def consensus_aggregate(
    client_updates: Sequence[dict[str, np.ndarray]],
    names: Sequence[str],
    granularity: str = CONSENSUS_GRANULARITY,
) -> tuple[dict[str, np.ndarray], list[LayerReport]]:
    """Consensus deltas for ``names``, one problem per tensor (``layer``) or one overall (``model``)."""
    if granularity not in GRANULARITIES:
        raise ConfigError(f"consensus_granularity must be one of {GRANULARITIES}, got {granularity!r}")
    if not client_updates:
        raise NoClientsError("consensus aggregation without clients")
    names = sorted(names)
    if not names:
        return {}, []

    templates = [np.asarray(client_updates[0][n]) for n in names]
    if granularity == "model":
        flat = [flatten_arrays([u[n] for n in names]) for u in client_updates]
        delta, report = aggregate_shared_layer(LayerUpdateSet.from_updates("model", flat))
        return dict(zip(names, unflatten_like(delta, templates))), [report]

    deltas, reports = {}, []
    for name, template in zip(names, templates):
        update_set = LayerUpdateSet.from_updates(name, [u[name] for u in client_updates])
        delta, report = aggregate_shared_layer(update_set)
        deltas[name] = delta.reshape(template.shape).astype(template.dtype)
        reports.append(report)
    return deltas, reports


# ── Attention aggregation ───────────────────────────────────────────────────

def attention_aggregate(params: Sequence[np.ndarray], tau: float = TAU) -> tuple[list[np.ndarray], AttentionMatrix]:
    """Per-client convex combinations ``softmax(Q Q^T / tau) V`` of one layer's parameters."""
    if len(params) == 0:
        raise NoClientsError("attention aggregation without clients")
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    shapes = {np.shape(p) for p in params}
    if len(shapes) != 1:
        raise AlignmentError(f"client parameters differ in shape {sorted(shapes)}")

    n = len(params)
    dtype = np.asarray(params[0]).dtype
    if n == 1 or all(np.array_equal(params[0], p) for p in params[1:]):
        return [np.array(p, copy=True) for p in params], AttentionMatrix(np.full((n, n), 1.0 / n), tau)

    values = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in params])
    norms = np.linalg.norm(values, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    queries = np.zeros_like(values)
    nonzero = norms > 0.0
    queries[nonzero] = values[nonzero] / norms[nonzero, None]
    logits = queries @ queries.T / tau
    logits[zero_rows, zero_rows] = 1.0 / tau
    if zero_rows.size:
        logger.warning(f"zero parameter vectors for clients {zero_rows.tolist()}")

    attention = F.softmax(logits, axis=1)
    mixed = attention @ values
    outputs = [row.reshape(np.shape(params[0])).astype(dtype) for row in mixed]
    return outputs, AttentionMatrix(attention, tau, zero_rows.tolist())


# ── Averages ────────────────────────────────────────────────────────────────

def weighted_average(arrays: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean with float64 accumulation; uniform weights when ``weights`` is None."""
    if len(arrays) == 0:
        raise NoClientsError("average over no clients")
    w = np.ones(len(arrays)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrays),) or np.any(w < 0) or w.sum() <= 0:
        raise AggregationError(f"invalid averaging weights {w.tolist()}")
    w = w / w.sum()
    total = np.zeros(np.shape(arrays[0]), dtype=np.float64)
    for wi, a in zip(w, arrays):
        total += wi * np.asarray(a, dtype=np.float64)
    return total.astype(np.asarray(arrays[0]).dtype)


def aggregate_bn_stats(
    client_stats: Sequence[dict[str, np.ndarray]],
    averaged_names: Sequence[str],
) -> tuple[dict[str, np.ndarray], list[dict[str, np.ndarray]]]:
    """Unweighted mean of the averaged statistics; every other statistic returns to its owner untouched."""
    if not client_stats:
        raise NoClientsError("BN statistics aggregation without clients")
    keys = set(client_stats[0])
    for k, stats in enumerate(client_stats[1:], start=1):
        if set(stats) != keys:
            raise AlignmentError(f"client {k} BN statistics differ by name: {sorted(keys ^ set(stats))}")
    missing = set(averaged_names) - keys
    if missing:
        raise AlignmentError(f"averaged statistics missing from clients: {sorted(missing)}")

    global_stats = {}
    for name in sorted(averaged_names):
        shapes = {np.shape(s[name]) for s in client_stats}
        if len(shapes) != 1:
            raise AlignmentError(f"{name}: shapes differ across clients {sorted(shapes)}")
        global_stats[name] = weighted_average([s[name] for s in client_stats])
    per_client = [
        {name: (global_stats[name].copy() if name in global_stats else value) for name, value in stats.items()}
        for stats in client_stats
    ]
    return global_stats, per_client
