"""
synthetic_domains.py — Seedable multi-domain classification data and its on-disk layout.

Every domain reuses the same base samples (so label marginals are identical)
and applies its own label-preserving feature transform:

    x' = nl(gain * rotate(x, angle) + offset) + noise

Directory layout (byte-exact in docs/FILE_FORMATS.md)::

    <root>/dataset.json
    <root>/domain_<id>/manifest.json
    <root>/domain_<id>/{train,val,test}.bin
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from config import (
    BUNDLE_FORMAT,
    CLASS_NOISE,
    DATASET_MANIFEST,
    DOMAIN_DEFS,
    DOMAIN_MANIFEST,
    LOW_FREQ_MAX,
    PROTOTYPE_SEPARATION,
    SPLIT_NAMES,
    SPLIT_RATIOS,
)
from errors import ConfigError, DataFormatError, EmptyDatasetError, LabelError, UnknownDomainError
from serialization import read_manifest, read_payload, write_payload
from utils import spawn_generators

logger = logging.getLogger(__name__)

BENCHMARK_NAME = "SynthDomains"


# ── Domain specs ────────────────────────────────────────────────────────────

_NONLINEARITIES = {
    "tanh": (np.tanh, np.arctanh),
}


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    angle: float = 0.0
    gain: tuple[float, ...] = (1.0,)
    offset: tuple[float, ...] = (0.0,)
    noise: float = 0.0
    nonlinearity: str | None = None

    def validate(self) -> None:
        if not self.gain or any(g <= 0 for g in self.gain):
            raise ConfigError(f"domain {self.domain_id}: gains must be positive, got {self.gain}")
        if self.noise < 0:
            raise ConfigError(f"domain {self.domain_id}: noise scale must be >= 0, got {self.noise}")
        if self.nonlinearity is not None and self.nonlinearity not in _NONLINEARITIES:
            raise ConfigError(
                f"domain {self.domain_id}: unknown nonlinearity {self.nonlinearity!r}; "
                f"expected one of {sorted(_NONLINEARITIES)}"
            )

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainSpec":
        return cls(
            domain_id=int(d["id"]),
            angle=float(d.get("angle", 0.0)),
            gain=tuple(float(g) for g in d.get("gain", [1.0])),
            offset=tuple(float(o) for o in d.get("offset", [0.0])),
            noise=float(d.get("noise", 0.0)),
            nonlinearity=d.get("nonlinearity"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.domain_id,
            "angle": self.angle,
            "gain": list(self.gain),
            "offset": list(self.offset),
            "noise": self.noise,
            "nonlinearity": self.nonlinearity,
        }


# Registry of the default benchmark domains
DEFAULT_DOMAINS: tuple[DomainSpec, ...] = tuple(DomainSpec.from_dict(d) for d in DOMAIN_DEFS)


def default_domains(count: int) -> list[DomainSpec]:
    if not 1 <= count <= len(DEFAULT_DOMAINS):
        raise ConfigError(f"num_domains must lie in [1, {len(DEFAULT_DOMAINS)}], got {count}")
    return list(DEFAULT_DOMAINS[:count])


# ── Datasets ────────────────────────────────────────────────────────────────

@dataclass
class DataSplit:
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray        # positions in the base sample order

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class LabeledDataset:
    domain: DomainSpec
    num_classes: int
    splits: dict[str, DataSplit] = field(default_factory=dict)

    @property
    def domain_id(self) -> int:
        return self.domain.domain_id

    @property
    def train(self) -> DataSplit:
        return self.splits["train"]

    @property
    def val(self) -> DataSplit:
        return self.splits["val"]

    @property
    def test(self) -> DataSplit:
        return self.splits["test"]

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(next(iter(self.splits.values())).features.shape[1:])

    def validate(self) -> None:
        missing = [name for name in SPLIT_NAMES if name not in self.splits]
        if missing:
            raise DataFormatError(f"domain {self.domain_id}: missing splits {missing}")
        seen: set[int] = set()
        shapes = set()
        for name, split in self.splits.items():
            if split.features.shape[0] != len(split) or split.indices.shape != split.labels.shape:
                raise DataFormatError(f"domain {self.domain_id}/{name}: feature, label and index counts disagree")
            if len(split) and (split.labels.min() < 0 or split.labels.max() >= self.num_classes):
                raise LabelError(
                    f"domain {self.domain_id}/{name}: labels must lie in [0, {self.num_classes}), "
                    f"got range [{split.labels.min()}, {split.labels.max()}]"
                )
            overlap = seen & set(split.indices.tolist())
            if overlap:
                raise DataFormatError(f"domain {self.domain_id}/{name}: overlaps another split at {sorted(overlap)[:5]}")
            seen.update(split.indices.tolist())
            shapes.add(split.features.shape[1:])
        if len(shapes) > 1:
            raise DataFormatError(f"domain {self.domain_id}: splits disagree on feature shape {sorted(shapes)}")


# ── Base task ───────────────────────────────────────────────────────────────

@dataclass
class BaseTask:
    prototypes: np.ndarray     # [K, *shape]
    features: np.ndarray       # [n, *shape]
    labels: np.ndarray         # [n]

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])


def _cosine_basis(height: int, width: int) -> np.ndarray:
    """Low-frequency 2-D cosine patterns, [F, H, W]."""
    rows = (np.arange(height) + 0.5) / height
    cols = (np.arange(width) + 0.5) / width
    basis = []
    for a in range(LOW_FREQ_MAX + 1):
        for b in range(LOW_FREQ_MAX + 1):
            basis.append(np.outer(np.cos(np.pi * a * rows), np.cos(np.pi * b * cols)))
    return np.stack(basis)


def make_base_task(
    num_classes: int,
    samples_per_class: int,
    shape: Sequence[int],
    rng: np.random.Generator,
    class_noise: float = CLASS_NOISE,
) -> BaseTask:
    """Class-conditional Gaussian blobs around well-separated prototypes.

    Image shapes ``(C, H, W)`` get prototypes built from low-frequency cosine
    patterns; flat shapes ``(d,)`` get Gaussian prototypes. Prototypes are
    centered and scaled so the closest pair lies PROTOTYPE_SEPARATION class
    standard deviations apart (or units, when the class noise is zero).
    """
    shape = tuple(int(s) for s in shape)
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if samples_per_class < 1:
        raise ConfigError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if len(shape) not in (1, 3) or min(shape) < 1:
        raise ConfigError(f"sample shape must be (C, H, W) or (d,), got {shape}")
    if class_noise < 0:
        raise ConfigError(f"class_noise must be >= 0, got {class_noise}")

    if len(shape) == 3:
        channels, height, width = shape
        basis = _cosine_basis(height, width)
        coeffs = rng.standard_normal((num_classes, channels, basis.shape[0]))
        prototypes = np.einsum("kcf,fhw->kchw", coeffs, basis)
    else:
        prototypes = rng.standard_normal((num_classes,) + shape)

    prototypes = prototypes - prototypes.mean(axis=0, keepdims=True)
    flat = prototypes.reshape(num_classes, -1)
    dists = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    closest = dists[~np.eye(num_classes, dtype=bool)].min()
    if closest <= 0:
        raise ConfigError("degenerate prototypes: two classes coincide")
    unit = class_noise if class_noise > 0 else 1.0
    prototypes = prototypes * (PROTOTYPE_SEPARATION * unit / closest)

    labels = rng.permutation(np.repeat(np.arange(num_classes), samples_per_class))
    noise = rng.standard_normal((labels.size,) + shape)
    features = prototypes[labels] + class_noise * noise
    return BaseTask(prototypes, features, labels.astype(np.int64))


# ── Domain transforms ───────────────────────────────────────────────────────

def _rotate_images(x: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation of [n, C, H, W] images about their centre, edges clamped."""
    _, _, height, width = x.shape
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(height) - cy, np.arange(width) - cx, indexing="ij")
    cos, sin = np.cos(angle), np.sin(angle)
    # Source coordinates of every output pixel; rounding keeps quarter turns exact.
    src_y = np.round(cos * yy - sin * xx + cy, 9)
    src_x = np.round(sin * yy + cos * xx + cx, 9)
    src_y = np.clip(src_y, 0, height - 1)
    src_x = np.clip(src_x, 0, width - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    fy = src_y - y0
    fx = src_x - x0
    return (
        x[..., y0, x0] * ((1 - fy) * (1 - fx))
        + x[..., y0, x1] * ((1 - fy) * fx)
        + x[..., y1, x0] * (fy * (1 - fx))
        + x[..., y1, x1] * (fy * fx)
    )


def _rotate_plane(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the first two coordinates of [n, d] vectors."""
    if x.shape[1] < 2:
        return x.copy()
    out = x.copy()
    cos, sin = np.cos(angle), np.sin(angle)
    out[:, 0] = cos * x[:, 0] - sin * x[:, 1]
    out[:, 1] = sin * x[:, 0] + cos * x[:, 1]
    return out


def rotate(x: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return x.copy()
    return _rotate_images(x, angle) if x.ndim == 4 else _rotate_plane(x, angle)


def _channel_shape(x: np.ndarray, values: Sequence[float], label: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    channels = x.shape[1]
    if values.size not in (1, channels):
        raise ConfigError(f"{label} has {values.size} entries for {channels} channels")
    return values.reshape((1, -1) + (1,) * (x.ndim - 2))


def transform_features(x: np.ndarray, spec: DomainSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    out = _channel_shape(x, spec.gain, "gain") * rotate(x, spec.angle) + _channel_shape(x, spec.offset, "offset")
    if spec.nonlinearity is not None:
        out = _NONLINEARITIES[spec.nonlinearity][0](out)
    if spec.noise > 0:
        if rng is None:
            raise ConfigError(f"domain {spec.domain_id}: a random generator is required for noise")
        out = out + spec.noise * rng.standard_normal(out.shape)
    return out


def invert_domain(x: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Analytic inverse of the noise-free transform."""
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    if spec.nonlinearity is not None:
        x = _NONLINEARITIES[spec.nonlinearity][1](x)
    x = (x - _channel_shape(x, spec.offset, "offset")) / _channel_shape(x, spec.gain, "gain")
    return rotate(x, -spec.angle)


def split_indices(labels: np.ndarray, rng: np.random.Generator,
                  ratios: Sequence[float] = SPLIT_RATIOS) -> dict[str, np.ndarray]:
    """Per-class shuffled split so every split keeps the label distribution."""
    bounds = np.cumsum(ratios)
    parts: dict[str, list[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        cuts = [int(np.floor(b * members.size + 1e-9)) for b in bounds[:-1]]
        for name, chunk in zip(SPLIT_NAMES, np.split(members, cuts)):
            parts[name].append(chunk)
    return {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}


def apply_domain(base: BaseTask, spec: DomainSpec, rng: np.random.Generator, dtype=np.float32) -> LabeledDataset:
    features = transform_features(base.features, spec, rng).astype(dtype)
    dataset = LabeledDataset(spec, base.num_classes)
    for name, idx in split_indices(base.labels, rng).items():
        dataset.splits[name] = DataSplit(features[idx], base.labels[idx].astype(np.int32), idx.astype(np.int32))
    dataset.validate()
    return dataset


def generate_benchmark(
    domains: Sequence[DomainSpec],
    num_classes: int,
    samples_per_class: int,
    shape: Sequence[int],
    seed: int,
    class_noise: float = CLASS_NOISE,
) -> list[LabeledDataset]:
    """Stream 0 draws the base task; stream ``i + 1`` drives domain ``i``."""
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids {ids}")
    streams = spawn_generators(seed, len(domains) + 1)
    base = make_base_task(num_classes, samples_per_class, shape, streams[0], class_noise)
    datasets = []
    for spec, rng in zip(domains, streams[1:]):
        datasets.append(apply_domain(base, spec, rng))
        logger.info(f"Generated domain {spec.domain_id}: {len(datasets[-1].train)} train samples")
    return datasets


def shift_diagnostics(datasets: Sequence[LabeledDataset]) -> list[dict[str, float]]:
    """Per domain: channel-mean statistics and the class-mean shift against the first domain."""
    def channel_means(split: DataSplit) -> np.ndarray:
        f = split.features.astype(np.float64)
        return f.reshape(f.shape[0], f.shape[1], -1).mean(axis=2) if f.ndim > 2 else f

    reference = datasets[0].train
    ref_feats = channel_means(reference)
    rows = []
    for ds in datasets:
        feats = channel_means(ds.train)
        shifts = []
        for cls in range(ds.num_classes):
            a = feats[ds.train.labels == cls]
            b = ref_feats[reference.labels == cls]
            if len(a) < 2 or len(b) < 2:
                continue
            pooled = np.sqrt((a.var(axis=0) + b.var(axis=0)) / 2.0) + 1e-12
            shifts.append(float(np.max(np.abs(a.mean(axis=0) - b.mean(axis=0)) / pooled)))
        rows.append({
            "domain": ds.domain_id,
            "mean": float(ds.train.features.mean()),
            "std": float(ds.train.features.std()),
            "class_shift": float(np.mean(shifts)) if shifts else 0.0,
        })
    return rows


# ── Persistence ─────────────────────────────────────────────────────────────

def _domain_dir(root: str, domain_id: int) -> str:
    return os.path.join(root, f"domain_{domain_id}")


def write_dataset(dataset: LabeledDataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    splits = {}
    for name, split in dataset.splits.items():
        entries = write_payload(
            os.path.join(directory, f"{name}.bin"),
            {"features": split.features, "labels": split.labels.astype(np.int32),
             "indices": split.indices.astype(np.int32)},
        )
        splits[name] = {"file": f"{name}.bin", "count": len(split), "arrays": entries}
    manifest = {
        "format": BUNDLE_FORMAT,
        "domain": dataset.domain.to_dict(),
        "num_classes": dataset.num_classes,
        "feature_shape": list(dataset.feature_shape),
        "splits": splits,
    }
    with open(os.path.join(directory, DOMAIN_MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_dataset(path: str) -> LabeledDataset:
    """Parse one ``domain_<id>`` directory and validate it."""
    manifest_path = os.path.join(path, DOMAIN_MANIFEST)
    manifest = read_manifest(manifest_path)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DataFormatError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    try:
        domain = DomainSpec.from_dict(manifest["domain"])
        num_classes = int(manifest["num_classes"])
        split_entries = manifest["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{manifest_path}: missing or invalid field {exc}") from None

    dataset = LabeledDataset(domain, num_classes)
    for name in SPLIT_NAMES:
        entry = split_entries.get(name)
        if entry is None:
            raise DataFormatError(f"{manifest_path}: split {name!r} missing")
        arrays = read_payload(os.path.join(path, entry.get("file", f"{name}.bin")), entry.get("arrays", []), manifest_path)
        missing = {"features", "labels", "indices"} - set(arrays)
        if missing:
            raise DataFormatError(f"{manifest_path}: split {name!r} lacks arrays {sorted(missing)}")
        dataset.splits[name] = DataSplit(arrays["features"], arrays["labels"], arrays["indices"])
    dataset.validate()
    return dataset


def write_benchmark(datasets: Sequence[LabeledDataset], root: str, meta: dict[str, Any]) -> None:
    os.makedirs(root, exist_ok=True)
    for ds in datasets:
        write_dataset(ds, _domain_dir(root, ds.domain_id))
    manifest = {
        "format": BUNDLE_FORMAT,
        "benchmark": f"{BENCHMARK_NAME}-{len(datasets)}",
        "domains": [ds.domain_id for ds in datasets],
        "num_classes": datasets[0].num_classes if datasets else 0,
        "feature_shape": list(datasets[0].feature_shape) if datasets else [],
        "meta": meta,
    }
    with open(os.path.join(root, DATASET_MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_benchmark(root: str, domain_ids: Sequence[int] | None = None) -> tuple[dict[str, Any], list[LabeledDataset]]:
    """Load the listed domains (all when ``domain_ids`` is None) in the order given."""
    manifest_path = os.path.join(root, DATASET_MANIFEST)
    manifest = read_manifest(manifest_path)
    available = [int(d) for d in manifest.get("domains", [])]
    if not available:
        raise EmptyDatasetError(f"{manifest_path}: benchmark lists no domains")
    wanted = available if domain_ids is None else [int(d) for d in domain_ids]
    unknown = [d for d in wanted if d not in available]
    if unknown:
        raise UnknownDomainError(f"unknown domain ids {unknown}; available: {available}")
    return manifest, [load_dataset(_domain_dir(root, d)) for d in wanted]
