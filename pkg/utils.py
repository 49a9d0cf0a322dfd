"""
utils.py — Vector and random-stream helpers for the simulator.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def flatten_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate arrays into one float64 vector (aggregation works in float64)."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def unflatten_like(vector: np.ndarray, templates: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Split ``vector`` into arrays shaped (and typed) like ``templates``."""
    out = []
    start = 0
    for t in templates:
        stop = start + t.size
        out.append(vector[start:stop].reshape(t.shape).astype(t.dtype))
        start = stop
    return out


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))


def clip_by_global_norm(arrays: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale every array by ``max_norm / norm`` when the joint norm exceeds ``max_norm``."""
    norm = global_norm(arrays)
    if max_norm <= 0 or norm <= max_norm:
        return arrays, norm
    scale = max_norm / (norm + 1e-6)
    return [(a * scale).astype(a.dtype) for a in arrays], norm


def spawn_generators(seed: int, count: int) -> list[np.random.Generator]:
    """Independent streams from one seed; stream i never depends on how many others are used."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    bit_gen = getattr(np.random, state["bit_generator"])()
    bit_gen.state = state
    return np.random.Generator(bit_gen)
