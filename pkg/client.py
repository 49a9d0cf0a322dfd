"""
client.py — Client state and local training (mini-batch SGD on L_task + lam * L_Con).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

import functional as F
from config import (
    BATCH_SIZE,
    BETA,
    BN_MOMENTUM,
    CHECKPOINT_EVERY,
    CLIP_NORM,
    CONSENSUS_GRANULARITY,
    DEFAULT_METHOD,
    LAMBDA,
    LEARNING_RATE,
    LOCAL_EPOCHS,
    LR_DECAY,
    PARALLEL_CLIENTS,
    ROUNDS,
    SEED,
    TAU,
)
from consistency import RegularizerConfig, layer_con_losses, snapshots_from_stats, weighted_con_loss
from errors import ConfigError
from model import DecomposedModel
from synthetic_domains import LabeledDataset
from tensor import Tape
from utils import clip_by_global_norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    method: str = DEFAULT_METHOD
    rounds: int = ROUNDS
    local_epochs: int = LOCAL_EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    lr_decay: float = LR_DECAY
    clip_norm: float = CLIP_NORM
    lam: float = LAMBDA
    beta: float = BETA
    tau: float = TAU
    momentum: float = BN_MOMENTUM
    seed: int = SEED
    consensus: bool = True
    personalize: bool = True
    consensus_granularity: str = CONSENSUS_GRANULARITY
    parallel_clients: int = PARALLEL_CLIENTS
    checkpoint_every: int = CHECKPOINT_EVERY

    def validate(self) -> None:
        for key in ("rounds", "local_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("batch_size", "parallel_clients"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("lr", "clip_norm", "lam", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class ClientState:
    """One client's held model state, data and random stream."""
    client_id: int
    dataset: LabeledDataset
    rng: np.random.Generator
    state: dict[str, np.ndarray] = field(default_factory=dict)
    local_epochs: int = LOCAL_EPOCHS

    @property
    def domain_id(self) -> int:
        return self.dataset.domain_id

    @property
    def num_samples(self) -> int:
        return len(self.dataset.train)

    def personalized(self, names) -> dict[str, np.ndarray]:
        return {name: self.state[name] for name in sorted(names)}


@dataclass
class LocalResult:
    client_id: int
    state: dict[str, np.ndarray]
    num_samples: int
    train_loss: float = float("nan")
    con_loss: float = float("nan")
    con_layers: list[float] = field(default_factory=list)   # per regularized block, last epoch mean
    steps: int = 0
    skipped: bool = False


def batch_slices(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive batches of ``order``; a trailing single sample joins the previous batch."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def global_reference(model: DecomposedModel) -> list[tuple[np.ndarray, np.ndarray]]:
    """BN_DFE running statistics of every DSE block, copied as the regularizer target."""
    return [(b.bn_dfe.running_mean.copy(), b.bn_dfe.running_var.copy()) for b in model.dse_blocks()]


def sgd_step(model: DecomposedModel, loss, lr: float, clip_norm: float, names=None) -> float:
    """Backpropagate ``loss``, clip the joint gradient norm and take one SGD step; returns the norm."""
    params = model.parameters()
    if names is not None:
        params = {n: params[n] for n in names}
    for p in model.parameters().values():
        p.zero_grad()
    loss.backward()
    grads, norm = clip_by_global_norm([p.grad for p in params.values()], clip_norm)
    for p, g in zip(params.values(), grads):
        p.data -= (lr * g).astype(p.data.dtype)
    return norm


def local_train(client: ClientState, template: DecomposedModel, cfg: TrainerConfig, lr: float,
                regularized: bool = False) -> LocalResult:
    """Run ``client.local_epochs`` epochs from the client's held state; returns the trained state."""
    n = client.num_samples
    if n < 2:
        logger.warning(f"Client {client.client_id}: {n} training samples, skipping this round")
        return LocalResult(client.client_id, dict(client.state), n, skipped=True)

    model = template.clone()
    model.load_state(client.state)
    use_con = regularized and cfg.lam > 0 and model.has_dse
    reference = global_reference(model) if use_con else []
    reg_cfg = RegularizerConfig(len(reference), cfg.lam, cfg.beta, cfg.momentum) if use_con else None

    rng = client.rng
    features, labels = client.dataset.train.features, client.dataset.train.labels
    task_losses: list[float] = []
    con_losses: list[float] = []
    layer_losses: list[list[float]] = []
    steps = 0
    for _ in range(client.local_epochs):
        task_losses, con_losses, layer_losses = [], [], []
        for idx in batch_slices(rng.permutation(n), cfg.batch_size):
            with Tape():
                logits, stats = model.forward_with_stats(features[idx], "train", collect_stats=use_con)
                task = F.softmax_cross_entropy(logits, labels[idx])
                loss = task
                if use_con:
                    terms = layer_con_losses(snapshots_from_stats(stats, reference, cfg.momentum), reg_cfg)
                    con = weighted_con_loss(terms, cfg.beta)
                    loss = task + con * cfg.lam
                    con_losses.append(con.item())
                    layer_losses.append([t.item() for t in terms])
            sgd_step(model, loss, lr, cfg.clip_norm)
            task_losses.append(task.item())
            steps += 1

    result = LocalResult(client.client_id, model.state_dict(), n, steps=steps)
    if task_losses:
        result.train_loss = float(np.mean(task_losses))
    result.con_loss = float(np.mean(con_losses)) if con_losses else 0.0
    if layer_losses:
        result.con_layers = np.mean(layer_losses, axis=0).tolist()
    logger.debug(
        f"Client {client.client_id}: {steps} steps, loss {result.train_loss:.4f}, L_Con {result.con_loss:.4f}"
    )
    return result
