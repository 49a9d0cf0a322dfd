"""
dse_block.py — Decomposed layer: domain-agnostic extractor + domain-specific skew eraser.

A block replaces ``conv -> BN -> ReLU`` with

    DFE:  conv(S -> ceil(T/G)) -> BN_DSE -> ReLU
    DSE:  depthwise cheap convs (dw x dw), G - 1 variants per DFE channel
    out:  ReLU(BN_DFE(concat[DFE channels | cheap channels]))

The DFE channels pass through to the concat unchanged (the identity mapping),
so only the G - 1 extra variants per channel are trainable. With G = 1 there
is no DSE and no BN_DSE; the block is exactly conv -> BN -> ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import functional as F
from config import BN_EPS, BN_MOMENTUM, CHEAP_KERNEL, EXPANSION
from errors import ArchitectureError, DimensionError, InvalidExpansionError
from tensor import Tensor, concat, get_default_dtype, parameter


@dataclass(frozen=True)
class DseBlockSpec:
    """DSEBlock(S, T, kernel_size, stride, padding, G, dw), optionally followed by MaxPool2D(pool)."""
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    expansion: int = EXPANSION
    cheap_kernel: int = CHEAP_KERNEL
    pool: int = 0
    name: str | None = None

    @property
    def dfe_channels(self) -> int:
        return math.ceil(self.out_channels / self.expansion)

    @property
    def dse_channels(self) -> int:
        return self.out_channels - self.dfe_channels

    @property
    def has_dse(self) -> bool:
        return self.expansion > 1

    def validate(self) -> None:
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1 or self.padding < 0:
            raise ArchitectureError(f"non-positive extent in {self}")
        if self.expansion < 1 or self.expansion > self.out_channels:
            raise InvalidExpansionError(
                f"expansion G={self.expansion} must lie in [1, T={self.out_channels}]"
            )
        if self.cheap_kernel < 1 or self.cheap_kernel % 2 == 0:
            raise ArchitectureError(f"cheap kernel dw={self.cheap_kernel} must be odd")

    def output_size(self, size: int) -> int:
        """Spatial extent after the block (before its optional pool)."""
        return F.conv_output_size(size, self.kernel_size, self.stride, self.padding)


# ── Batch norm layer ────────────────────────────────────────────────────────

class BatchNorm:
    """Affine batch norm over channels with momentum-weighted running statistics."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> None:
        dtype = get_default_dtype()
        self.weight: Tensor = parameter(np.ones(channels, dtype=dtype))
        self.bias: Tensor = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean: np.ndarray = np.zeros(channels, dtype=dtype)
        self.running_var: np.ndarray = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.frozen_stats: bool = False

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out, mean, var = F.batchnorm_forward(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=training and not self.frozen_stats, momentum=self.momentum, eps=self.eps,
        )
        if training and not self.frozen_stats:
            self.running_mean, self.running_var = mean, var
        return out


@dataclass
class BatchStats:
    """Statistics of a block's BN_DFE input for one forward pass.

    ``mean`` and ``var`` are differentiable batch statistics; ``prior_mean``
    and ``prior_var`` are BN_DFE's running statistics before this batch.
    """
    mean: Tensor
    var: Tensor
    prior_mean: np.ndarray
    prior_var: np.ndarray
    has_dse: bool


# ── Block ───────────────────────────────────────────────────────────────────

def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class DseBlock:
    """One decomposed layer; owns its parameters and BN buffers."""

    def __init__(self, spec: DseBlockSpec, rng: np.random.Generator, momentum: float = BN_MOMENTUM) -> None:
        spec.validate()
        self.spec = spec
        k = spec.kernel_size
        self.dfe_conv: Tensor = parameter(
            _kaiming_uniform(rng, (spec.dfe_channels, spec.in_channels, k, k), spec.in_channels * k * k)
        )
        self.bn_dfe = BatchNorm(spec.out_channels, momentum)
        self.bn_dse: BatchNorm | None = None
        self.dse_conv: Tensor | None = None
        if spec.has_dse:
            dw = spec.cheap_kernel
            self.bn_dse = BatchNorm(spec.dfe_channels, momentum)
            self.dse_conv = parameter(_kaiming_uniform(rng, (spec.dse_channels, 1, dw, dw), dw * dw))

    # ── Naming ──────────────────────────────────────────────────────────

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.dfe_conv.weight": self.dfe_conv}
        if self.bn_dse is not None:
            params[f"{prefix}.bn_dse.weight"] = self.bn_dse.weight
            params[f"{prefix}.bn_dse.bias"] = self.bn_dse.bias
            params[f"{prefix}.dse_conv.weight"] = self.dse_conv
        params[f"{prefix}.bn_dfe.weight"] = self.bn_dfe.weight
        params[f"{prefix}.bn_dfe.bias"] = self.bn_dfe.bias
        return params

    def named_norms(self, prefix: str) -> dict[str, BatchNorm]:
        norms = {}
        if self.bn_dse is not None:
            norms[f"{prefix}.bn_dse"] = self.bn_dse
        norms[f"{prefix}.bn_dfe"] = self.bn_dfe
        return norms

    # ── Forward ─────────────────────────────────────────────────────────

    def _cheap_variants(self, h: Tensor) -> Tensor:
        """Depthwise cheap convs: output channel j reads DFE channel j // (G - 1)."""
        spec = self.spec
        full = spec.dfe_channels * (spec.expansion - 1)
        weight = self.dse_conv
        if full > spec.dse_channels:
            # The last DFE channel spawns fewer variants; pad with inert kernels and truncate.
            dw = spec.cheap_kernel
            pad = Tensor(np.zeros((full - spec.dse_channels, 1, dw, dw), dtype=weight.data.dtype))
            weight = concat([weight, pad], axis=0)
        out = F.grouped_conv2d(h, weight, groups=spec.dfe_channels, padding=spec.cheap_kernel // 2)
        if full > spec.dse_channels:
            out = out[:, : spec.dse_channels]
        return out

    def forward(self, x: Tensor, training: bool, collect_stats: bool = False) -> tuple[Tensor, BatchStats | None]:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels:
            raise DimensionError(f"block expects {spec.in_channels} input channels, got shape {x.shape}")
        h = F.conv2d(x, self.dfe_conv, stride=spec.stride, padding=spec.padding)
        if self.bn_dse is not None:
            h = F.relu(self.bn_dse(h, training))
            h = concat([h, self._cheap_variants(h)], axis=1)

        stats = None
        if collect_stats:
            mean, var = F.batch_statistics(h)
            stats = BatchStats(mean, var, self.bn_dfe.running_mean, self.bn_dfe.running_var, spec.has_dse)
        out = F.relu(self.bn_dfe(h, training))
        return out, stats


def decompose_layer(spec: DseBlockSpec, rng: np.random.Generator, momentum: float = BN_MOMENTUM) -> DseBlock:
    return DseBlock(spec, rng, momentum)


def block_forward(block: DseBlock, x: Tensor, mode: str = "train") -> Tensor:
    """Forward one block in ``"train"`` or ``"eval"`` mode; accepts a single [S, H, W] image."""
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    out, _ = block.forward(x, training=(mode == "train"))
    return out.reshape(out.shape[1:]) if unbatched else out
