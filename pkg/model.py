"""
model.py — Decomposed classifier: a chain of DSE blocks, optional pooling, and a linear head.

Parameter names are dotted (``block0.dfe_conv.weight``, ``head.bias``) and
stable across clients, so state dicts align by name during aggregation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

import functional as F
from config import (
    AVGPOOL_SIZE,
    BLOCK_CHANNELS,
    BN_MOMENTUM,
    CHEAP_KERNEL,
    EXPANSION,
    IMAGE_CHANNELS,
    IMAGE_SIZE,
    KERNEL_SIZE,
    NUM_CLASSES,
    POOL_SIZE,
)
from dse_block import BatchNorm, BatchStats, DseBlock, DseBlockSpec, decompose_layer
from errors import AlignmentError, ArchitectureError, ConfigError
from tensor import Tensor, as_tensor, get_default_dtype, parameter

HEAD = "head"
MODES = ("train", "eval")


# ── Architecture description ────────────────────────────────────────────────

@dataclass(frozen=True)
class ArchitectureSpec:
    """Input shape, block chain, pooling and head of a decomposed model.

    ``input_shape`` is ``(C, H, W)`` for images or ``(d,)`` for flat features
    (flat inputs admit no blocks: the model is then logistic regression).
    """
    input_shape: tuple[int, ...]
    blocks: tuple[DseBlockSpec, ...] = ()
    avgpool: int = 0
    num_classes: int = NUM_CLASSES
    momentum: float = BN_MOMENTUM

    @classmethod
    def from_settings(
        cls,
        channels: Iterable[int] = BLOCK_CHANNELS,
        kernel_size: int = KERNEL_SIZE,
        expansion: int = EXPANSION,
        cheap_kernel: int = CHEAP_KERNEL,
        pool: int = POOL_SIZE,
        avgpool: int = AVGPOOL_SIZE,
        num_classes: int = NUM_CLASSES,
        input_shape: tuple[int, ...] = (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
        momentum: float = BN_MOMENTUM,
    ) -> "ArchitectureSpec":
        """Same-padded conv blocks, each followed by a ``pool x pool`` max pool."""
        blocks = []
        in_channels = input_shape[0]
        for out_channels in channels:
            blocks.append(DseBlockSpec(
                in_channels, out_channels, kernel_size,
                stride=1, padding=kernel_size // 2,
                expansion=expansion, cheap_kernel=cheap_kernel, pool=pool,
            ))
            in_channels = out_channels
        return cls(tuple(input_shape), tuple(blocks), avgpool, num_classes, momentum)

    def undecomposed(self) -> "ArchitectureSpec":
        """The same network with every block at G = 1 (plain conv + BN + ReLU)."""
        return replace(self, blocks=tuple(replace(b, expansion=1) for b in self.blocks))

    def block_names(self) -> list[str]:
        return [spec.name or f"block{i}" for i, spec in enumerate(self.blocks)]

    def feature_size(self) -> int:
        """Width of the flattened features entering the head; validates the whole chain."""
        if self.num_classes < 2:
            raise ArchitectureError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.input_shape) == 1:
            if self.blocks or self.avgpool:
                raise ArchitectureError("flat inputs admit no conv blocks or pooling")
            return self.input_shape[0]
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchitectureError(f"input shape must be (C, H, W) or (d,), got {self.input_shape}")

        channels, height, width = self.input_shape
        for name, spec in zip(self.block_names(), self.blocks):
            if spec.in_channels != channels:
                raise ArchitectureError(
                    f"{name}: expects {spec.in_channels} input channels, previous stage yields {channels}"
                )
            spec.validate()
            height, width = spec.output_size(height), spec.output_size(width)
            if spec.pool:
                height = F.conv_output_size(height, spec.pool, spec.pool, 0)
                width = F.conv_output_size(width, spec.pool, spec.pool, 0)
            if height < 1 or width < 1:
                raise ArchitectureError(f"{name}: spatial extent collapses to {height}x{width}")
            channels = spec.out_channels
        if self.avgpool:
            height = width = self.avgpool
        return channels * height * width


# ── Parameter partition ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class ParamPartition:
    """Split of the model state into shared / personalized parameters and local / averaged BN stats."""
    shared: frozenset[str]
    personalized: frozenset[str]
    local_stats: frozenset[str]
    averaged_stats: frozenset[str]

    def validate(self, parameter_names: Iterable[str], stat_names: Iterable[str]) -> None:
        parameter_names, stat_names = set(parameter_names), set(stat_names)
        if self.shared & self.personalized:
            raise ArchitectureError(f"parameters both shared and personalized: {sorted(self.shared & self.personalized)}")
        if self.shared | self.personalized != parameter_names:
            raise ArchitectureError("shared and personalized sets do not cover the trainable parameters")
        if self.local_stats & self.averaged_stats or self.local_stats | self.averaged_stats != stat_names:
            raise ArchitectureError("every running statistic must be exactly one of local or averaged")

    def kind(self, name: str) -> str:
        for kind, names in (
            ("shared", self.shared),
            ("personalized", self.personalized),
            ("local_stats", self.local_stats),
            ("averaged_stats", self.averaged_stats),
        ):
            if name in names:
                return kind
        raise AlignmentError(f"{name!r} is not part of the model state")


def _is_dse_state(name: str) -> bool:
    return ".bn_dse." in name or ".dse_conv." in name


# ── Model ───────────────────────────────────────────────────────────────────

class DecomposedModel:
    """Blocks, pools and head; owns every parameter and running statistic."""

    def __init__(self, arch: ArchitectureSpec, blocks: list[DseBlock], names: list[str],
                 head_weight: Tensor, head_bias: Tensor) -> None:
        self.arch = arch
        self.blocks = blocks
        self.block_names = names
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.partition = self._build_partition()

    # ── State access ────────────────────────────────────────────────────

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, block in zip(self.block_names, self.blocks):
            params.update(block.named_parameters(name))
        params[f"{HEAD}.weight"] = self.head_weight
        params[f"{HEAD}.bias"] = self.head_bias
        return params

    def norms(self) -> dict[str, BatchNorm]:
        norms: dict[str, BatchNorm] = {}
        for name, block in zip(self.block_names, self.blocks):
            norms.update(block.named_norms(name))
        return norms

    def buffers(self) -> dict[str, np.ndarray]:
        buffers = {}
        for name, norm in self.norms().items():
            buffers[f"{name}.running_mean"] = norm.running_mean.copy()
            buffers[f"{name}.running_var"] = norm.running_var.copy()
        return buffers

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic, parameters first."""
        state = {name: p.data.copy() for name, p in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite the named entries of ``state``; names absent from ``state`` are left alone."""
        params = self.parameters()
        norms = self.norms()
        for name, value in state.items():
            value = np.asarray(value)
            if name in params:
                target = params[name]
                if value.shape != target.shape:
                    raise AlignmentError(f"{name}: shape {value.shape} does not match {target.shape}")
                target.data = value.astype(target.data.dtype, copy=True)
                continue
            owner, _, stat = name.rpartition(".")
            norm = norms.get(owner)
            if norm is None or stat not in ("running_mean", "running_var"):
                raise AlignmentError(f"{name!r} is not part of the model state")
            current = getattr(norm, stat)
            if value.shape != current.shape:
                raise AlignmentError(f"{name}: shape {value.shape} does not match {current.shape}")
            setattr(norm, stat, value.astype(current.dtype, copy=True))

    def clone(self) -> "DecomposedModel":
        twin = copy.deepcopy(self)
        for p in twin.parameters().values():
            p.grad = None
            p._tape = None
        return twin

    @property
    def has_dse(self) -> bool:
        return any(block.spec.has_dse for block in self.blocks)

    def dse_blocks(self) -> list[DseBlock]:
        return [block for block in self.blocks if block.spec.has_dse]

    def freeze_dfe_stats(self, frozen: bool = True) -> None:
        for block in self.blocks:
            block.bn_dfe.frozen_stats = frozen

    # ── Forward ─────────────────────────────────────────────────────────

    def forward_with_stats(self, x, mode: str = "train", collect_stats: bool = True) -> tuple[Tensor, list[BatchStats]]:
        """Logits plus the BN_DFE input statistics of every block that has a DSE."""
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        training = mode == "train"
        h = as_tensor(x)
        stats: list[BatchStats] = []
        for block in self.blocks:
            h, block_stats = block.forward(h, training, collect_stats and block.spec.has_dse)
            if block_stats is not None:
                stats.append(block_stats)
            if block.spec.pool:
                h = F.max_pool2d(h, block.spec.pool)
        if self.arch.avgpool:
            h = F.adaptive_avg_pool2d(h, self.arch.avgpool)
        if h.ndim > 2:
            h = F.flatten(h)
        return F.linear(h, self.head_weight, self.head_bias), stats

    def forward(self, x, mode: str = "eval") -> Tensor:
        logits, _ = self.forward_with_stats(x, mode, collect_stats=False)
        return logits

    __call__ = forward

    # ── Partition ───────────────────────────────────────────────────────

    def _build_partition(self) -> ParamPartition:
        params = list(self.parameters())
        stats = list(self.buffers())
        partition = ParamPartition(
            shared=frozenset(n for n in params if not _is_dse_state(n)),
            personalized=frozenset(n for n in params if _is_dse_state(n)),
            local_stats=frozenset(n for n in stats if _is_dse_state(n)),
            averaged_stats=frozenset(n for n in stats if not _is_dse_state(n)),
        )
        partition.validate(params, stats)
        return partition


def build_model(arch: ArchitectureSpec, rng: np.random.Generator) -> DecomposedModel:
    """Initialize every block in order, then the head; raises ArchitectureError on a bad chain."""
    features = arch.feature_size()
    names = arch.block_names()
    duplicates = sorted({n for n in names if names.count(n) > 1} | ({HEAD} & set(names)))
    if duplicates:
        raise ArchitectureError(f"duplicate parameter names for blocks {duplicates}")

    blocks = [decompose_layer(spec, rng, arch.momentum) for spec in arch.blocks]
    bound = math.sqrt(6.0 / features)
    head_weight = parameter(rng.uniform(-bound, bound, size=(arch.num_classes, features)).astype(get_default_dtype()))
    head_bias = parameter(np.zeros(arch.num_classes, dtype=get_default_dtype()))
    return DecomposedModel(arch, blocks, names, head_weight, head_bias)


# ── Parameter counting ──────────────────────────────────────────────────────

@dataclass
class ParamCount:
    shared: int
    personalized: int
    per_block: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.shared + self.personalized

    def to_dict(self) -> dict:
        return {"shared": self.shared, "personalized": self.personalized,
                "total": self.total, "per_block": self.per_block}


def count_params(model: DecomposedModel) -> ParamCount:
    """Exact trainable-parameter counts; running statistics are not parameters."""
    params = model.parameters()
    partition = model.partition
    per_block: dict[str, dict[str, int]] = {}
    for name in model.block_names + [HEAD]:
        entries = {}
        for pname, p in params.items():
            if pname.startswith(name + "."):
                part = pname[len(name) + 1:].rsplit(".", 1)[0] if name != HEAD else pname[len(HEAD) + 1:]
                entries[part] = entries.get(part, 0) + p.size
        per_block[name] = entries
    return ParamCount(
        shared=sum(params[n].size for n in partition.shared),
        personalized=sum(params[n].size for n in partition.personalized),
        per_block=per_block,
    )


def count_undecomposed(arch: ArchitectureSpec) -> ParamCount:
    """Counts for the same architecture with every block at G = 1."""
    return count_params(build_model(arch.undecomposed(), np.random.default_rng(0)))
