"""
Shared fixtures: tiny benchmarks, architectures and a finite-difference helper.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from client import TrainerConfig
from model import ArchitectureSpec
from synthetic_domains import default_domains, generate_benchmark
from tensor import Tape, default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with default_dtype("float64"):
        yield


@pytest.fixture(autouse=True)
def _isolated_output_root(monkeypatch):
    monkeypatch.delenv("FDSE_OUTPUT_ROOT", raising=False)


def numerical_grad(fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + eps
        plus = fn()
        array[idx] = original - eps
        minus = fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def analytic_grad(build_loss, tensors):
    """Run ``build_loss()`` on a fresh tape and return the gradients of ``tensors``."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return [t.grad for t in tensors]


@pytest.fixture
def image_arch():
    """Two small blocks on 1x8x8 inputs with G = 2."""
    return ArchitectureSpec.from_settings(
        channels=[4, 6], kernel_size=3, expansion=2, cheap_kernel=3, pool=2, avgpool=0,
        num_classes=3, input_shape=(1, 8, 8),
    )


@pytest.fixture
def flat_arch():
    return ArchitectureSpec(input_shape=(16,), blocks=(), avgpool=0, num_classes=3)


@pytest.fixture(scope="session")
def image_benchmark():
    return generate_benchmark(default_domains(3), num_classes=3, samples_per_class=20,
                              shape=(1, 8, 8), seed=7, class_noise=0.35)


@pytest.fixture(scope="session")
def flat_benchmark():
    return generate_benchmark(default_domains(3), num_classes=3, samples_per_class=20,
                              shape=(16,), seed=7, class_noise=0.35)


@pytest.fixture
def trainer_cfg():
    return TrainerConfig(method="fdse", rounds=2, local_epochs=1, batch_size=16, lr=0.05,
                         lr_decay=1.0, clip_norm=10.0, lam=0.1, tau=0.1, seed=3,
                         checkpoint_every=1)


def with_method(cfg: TrainerConfig, method: str, **changes) -> TrainerConfig:
    return replace(cfg, method=method, **changes)
