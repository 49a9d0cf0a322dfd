"""
adaptation.py — Label-free adaptation of a trained model to an unseen domain.

* FedBN: one pass over the target data in train mode refreshes every BN
  running statistic; no gradient steps.
* FDSE: only the DSE kernels and BN_DSE affine parameters are trained, on the
  consistency loss alone, against the frozen BN_DFE statistics.
* FedAvg uses the global model unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from config import ADAPT_EPOCHS, ADAPT_LR_SCALE, BATCH_SIZE, BETA, BN_MOMENTUM, CLIP_NORM, LEARNING_RATE
from client import batch_slices, sgd_step
from consistency import RegularizerConfig, running_snapshot, total_con_loss
from errors import EmptyDatasetError, NotApplicableError
from methods import Method
from model import DecomposedModel
from tensor import Tape, no_grad

logger = logging.getLogger(__name__)


@dataclass
class AdaptationResult:
    model: DecomposedModel
    con_trace: list[float] = field(default_factory=list)
    rejected_epochs: list[int] = field(default_factory=list)


def _require_target(features: np.ndarray) -> None:
    if len(features) == 0:
        raise EmptyDatasetError("adaptation target has no samples")


def adapt_fedbn(model: DecomposedModel, features: np.ndarray, passes: int = 1,
                batch_size: int = BATCH_SIZE) -> DecomposedModel:
    """Refresh every BN running statistic with train-mode passes over ``features`` in order."""
    _require_target(features)
    adapted = model.clone()
    adapted.freeze_dfe_stats(False)
    order = np.arange(len(features))
    with no_grad():
        for _ in range(passes):
            for idx in batch_slices(order, batch_size):
                if len(idx) < 2:
                    continue
                adapted.forward_with_stats(features[idx], "train", collect_stats=False)
    return adapted


def measure_con_loss(model: DecomposedModel, features: np.ndarray, reference, beta: float = BETA) -> float:
    """L_Con of the full target set in eval mode against ``reference`` statistics."""
    with no_grad():
        _, stats = model.forward_with_stats(features, "eval", collect_stats=True)
    snapshots = [
        running_snapshot(l, s.mean, s.var, g_mean, g_var, g_mean, g_var, momentum=0.0)
        for l, (s, (g_mean, g_var)) in enumerate(zip(stats, reference), start=1)
    ]
    return total_con_loss(snapshots, RegularizerConfig(len(snapshots), 1.0, beta, 0.0)).item()


def _dse_state(model: DecomposedModel, names: list[str]) -> dict[str, np.ndarray]:
    state = model.state_dict()
    return {n: state[n] for n in names}


def adapt_fdse(
    model: DecomposedModel,
    features: np.ndarray,
    epochs: int = ADAPT_EPOCHS,
    lr: float = ADAPT_LR_SCALE * LEARNING_RATE,
    rng: np.random.Generator | None = None,
    batch_size: int = BATCH_SIZE,
    beta: float = BETA,
    momentum: float = BN_MOMENTUM,
    clip_norm: float = CLIP_NORM,
) -> AdaptationResult:
    """Fine-tune the DSE modules on L_Con; an epoch that raises the full-set L_Con is undone and the step halved."""
    if not model.has_dse:
        raise NotApplicableError("model has no DSE modules to adapt")
    _require_target(features)
    rng = rng if rng is not None else np.random.default_rng(0)

    adapted = model.clone()
    adapted.freeze_dfe_stats(True)
    trainable = sorted(adapted.partition.personalized)
    local_stats = sorted(adapted.partition.local_stats)
    reference = [(b.bn_dfe.running_mean.copy(), b.bn_dfe.running_var.copy()) for b in adapted.dse_blocks()]
    reg_cfg = RegularizerConfig(len(reference), 1.0, beta, momentum)
    running = [(m.copy(), v.copy()) for m, v in reference]

    current = measure_con_loss(adapted, features, reference, beta)
    result = AdaptationResult(adapted, [current])
    n = len(features)
    for epoch in range(epochs):
        saved = _dse_state(adapted, trainable + local_stats)
        saved_running = [(m.copy(), v.copy()) for m, v in running]
        for idx in batch_slices(rng.permutation(n), batch_size):
            if len(idx) < 2:
                continue
            with Tape():
                _, stats = adapted.forward_with_stats(features[idx], "train", collect_stats=True)
                snapshots = [
                    running_snapshot(l, s.mean, s.var, r_mean, r_var, g_mean, g_var, momentum)
                    for l, (s, (r_mean, r_var), (g_mean, g_var)) in enumerate(zip(stats, running, reference), start=1)
                ]
                loss = total_con_loss(snapshots, reg_cfg)
            sgd_step(adapted, loss, lr, clip_norm, trainable)
            running = [(snap.mean.data.copy(), snap.var.data.copy()) for snap in snapshots]

        value = measure_con_loss(adapted, features, reference, beta)
        if value > current:
            adapted.load_state(saved)
            running = saved_running
            lr *= 0.5
            result.rejected_epochs.append(epoch)
            logger.info(f"Adaptation epoch {epoch}: L_Con rose to {value:.6f}; undone, step now {lr:.2e}")
        else:
            current = value
        result.con_trace.append(current)
    return result


def adapt_model(method: Method, model: DecomposedModel, features: np.ndarray, epochs: int = ADAPT_EPOCHS,
                lr: float = ADAPT_LR_SCALE * LEARNING_RATE, rng: np.random.Generator | None = None,
                batch_size: int = BATCH_SIZE, beta: float = BETA, momentum: float = BN_MOMENTUM,
                clip_norm: float = CLIP_NORM) -> AdaptationResult:
    """Dispatch to the method's adaptation procedure; ``epochs == 0`` leaves the model untouched.

    ``beta``, ``momentum`` and ``clip_norm`` should be the values the run trained with.
    """
    if method.adaptation is None:
        raise NotApplicableError(f"method {method.name!r} has no unseen-domain adaptation")
    if method.adaptation == "fdse":
        return adapt_fdse(model, features, epochs, lr, rng, batch_size, beta, momentum, clip_norm)
    if method.adaptation == "fedbn" and epochs > 0:
        return AdaptationResult(adapt_fedbn(model, features, batch_size=batch_size))
    return AdaptationResult(model.clone())
