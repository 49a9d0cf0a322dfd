"""
experiment_config.py — Flat YAML experiment configuration validated against a schema table.

Every key has a type, a default taken from config.py and a one-line
description (``python main.py --show-config`` prints the table).
Command-line flags override file values; the fully resolved mapping is what
gets written into each run directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import yaml

from client import TrainerConfig
from config import (
    ADAPT_EPOCHS,
    ADAPT_LR_SCALE,
    AVGPOOL_SIZE,
    BATCH_SIZE,
    BETA,
    BLOCK_CHANNELS,
    BN_MOMENTUM,
    CHEAP_KERNEL,
    CHECKPOINT_EVERY,
    CLASS_NOISE,
    CLIP_NORM,
    CONSENSUS_GRANULARITY,
    DATA_SEED,
    DATASET_DIR,
    DEFAULT_DTYPE,
    DEFAULT_METHOD,
    EXPANSION,
    IMAGE_SIZE,
    KERNEL_SIZE,
    LAMBDA,
    LEARNING_RATE,
    LOCAL_EPOCHS,
    LR_DECAY,
    NUM_CLASSES,
    NUM_DOMAINS,
    OUTPUT_DIR,
    PARALLEL_CLIENTS,
    POOL_SIZE,
    ROUNDS,
    SAMPLES_PER_CLASS,
    SEED,
    TAU,
)
from errors import ConfigError, DataFormatError
from model import ArchitectureSpec


def _int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _float(value: Any) -> bool:
    return _int(value) or isinstance(value, float)


def _int_list(value: Any) -> bool:
    return isinstance(value, list) and all(_int(v) for v in value)


_CHECKS: dict[str, tuple[Callable[[Any], bool], str]] = {
    "int": (_int, "an integer"),
    "float": (_float, "a number"),
    "bool": (lambda v: isinstance(v, bool), "true or false"),
    "str": (lambda v: isinstance(v, str), "a string"),
    "int_list": (_int_list, "a list of integers"),
}

# key: (kind, default, description)
SCHEMA: dict[str, tuple[str, Any, str]] = {
    "method":                ("str", DEFAULT_METHOD, "fdse | fedavg | fedbn | local"),
    "rounds":                ("int", ROUNDS, "communication rounds T"),
    "local_epochs":          ("int", LOCAL_EPOCHS, "local epochs E per round"),
    "batch_size":            ("int", BATCH_SIZE, "mini-batch size B"),
    "lr":                    ("float", LEARNING_RATE, "base learning rate"),
    "lr_decay":              ("float", LR_DECAY, "per-round learning-rate decay ratio"),
    "clip_norm":             ("float", CLIP_NORM, "global gradient-norm clip (0 disables)"),
    "lam":                   ("float", LAMBDA, "consistency regularizer coefficient"),
    "beta":                  ("float", BETA, "depth weighting rate of the regularizer"),
    "tau":                   ("float", TAU, "attention temperature for personalized parameters"),
    "momentum":              ("float", BN_MOMENTUM, "BN running-statistic momentum (weight of the old value)"),
    "seed":                  ("int", SEED, "training seed (model init and client streams)"),
    "dtype":                 ("str", DEFAULT_DTYPE, "float32 | float64"),
    "block_channels":        ("int_list", list(BLOCK_CHANNELS), "output channels per DSE block"),
    "kernel_size":           ("int", KERNEL_SIZE, "DFE convolution kernel size"),
    "expansion":             ("int", EXPANSION, "expansion G (1 = no DSE)"),
    "cheap_kernel":          ("int", CHEAP_KERNEL, "DSE depthwise kernel size dw (odd)"),
    "pool":                  ("int", POOL_SIZE, "max-pool size after each block (0 = none)"),
    "avgpool":               ("int", AVGPOOL_SIZE, "adaptive average pool before the head (0 = none)"),
    "consensus":             ("bool", True, "min-norm consensus for shared parameters (false = FedAvg mean)"),
    "personalize":           ("bool", True, "attention for personalized parameters (false = uniform mean)"),
    "consensus_granularity": ("str", CONSENSUS_GRANULARITY, "layer | model"),
    "parallel_clients":      ("int", PARALLEL_CLIENTS, "client tasks run concurrently"),
    "checkpoint_every":      ("int", CHECKPOINT_EVERY, "checkpoint period in rounds (0 = none)"),
    "dataset":               ("str", DATASET_DIR, "dataset directory"),
    "output_dir":            ("str", OUTPUT_DIR, "run directory"),
    "holdout":               ("int_list", [], "domain ids excluded from training"),
    "num_domains":           ("int", NUM_DOMAINS, "generated domains"),
    "num_classes":           ("int", NUM_CLASSES, "generated classes"),
    "samples_per_class":     ("int", SAMPLES_PER_CLASS, "generated samples per class and domain"),
    "image_size":            ("int", IMAGE_SIZE, "generated image side (0 = flat 16-d vectors)"),
    "class_noise":           ("float", CLASS_NOISE, "within-class standard deviation"),
    "data_seed":             ("int", DATA_SEED, "generator seed"),
    "adapt_epochs":          ("int", ADAPT_EPOCHS, "adaptation epochs for unseen domains"),
    "adapt_lr_scale":        ("float", ADAPT_LR_SCALE, "adaptation lr as a fraction of lr"),
}

_CHOICES: dict[str, tuple[str, ...]] = {
    "method": ("fdse", "fedavg", "fedbn", "local"),
    "dtype": ("float32", "float64"),
    "consensus_granularity": ("layer", "model"),
}

_TRAINER_KEYS = (
    "method", "rounds", "local_epochs", "batch_size", "lr", "lr_decay", "clip_norm", "lam", "beta",
    "tau", "momentum", "seed", "consensus", "personalize", "consensus_granularity",
    "parallel_clients", "checkpoint_every",
)

FLAT_FEATURES = 16


def defaults() -> dict[str, Any]:
    return {key: (list(default) if isinstance(default, list) else default)
            for key, (_, default, _) in SCHEMA.items()}


def validate(values: dict[str, Any]) -> None:
    for key, value in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        check, expected = _CHECKS[kind]
        if not check(value):
            raise ConfigError(f"config key {key!r} must be {expected}, got {value!r}")
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"config key {key!r} must be one of {list(_CHOICES[key])}, got {value!r}")


def load_file(path: str) -> dict[str, Any]:
    try:
        with open(path, "r") as f:
            values = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}:{mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: malformed YAML") from None
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: config must be a mapping of keys to values")
    validate(values)
    return values


def resolve(path: str | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then the file, then non-None overrides; validated at every layer."""
    values = defaults()
    if path:
        values.update(load_file(path))
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    validate(overrides)
    values.update(overrides)
    return values


def dump(values: dict[str, Any]) -> str:
    return yaml.safe_dump(values, sort_keys=True)


def write(values: dict[str, Any], path: str) -> None:
    """Store resolved settings so that ``--config path`` reproduces them."""
    with open(path, "w") as f:
        f.write(dump(values))


def describe() -> str:
    width = max(len(k) for k in SCHEMA)
    return "\n".join(f"{key:<{width}}  {default!r:<16} {text}" for key, (_, default, text) in SCHEMA.items())


@dataclass
class ExperimentConfig:
    """Resolved settings split into the pieces the simulator consumes."""
    values: dict[str, Any]

    @property
    def trainer(self) -> TrainerConfig:
        cfg = TrainerConfig(**{k: self.values[k] for k in _TRAINER_KEYS})
        cfg.validate()
        return cfg

    def sample_shape(self) -> tuple[int, ...]:
        size = self.values["image_size"]
        return (1, size, size) if size else (FLAT_FEATURES,)

    def architecture(self, input_shape: tuple[int, ...], num_classes: int) -> ArchitectureSpec:
        v = self.values
        if len(input_shape) == 1:
            return ArchitectureSpec(tuple(input_shape), (), 0, num_classes, v["momentum"])
        return ArchitectureSpec.from_settings(
            channels=v["block_channels"],
            kernel_size=v["kernel_size"],
            expansion=v["expansion"],
            cheap_kernel=v["cheap_kernel"],
            pool=v["pool"],
            avgpool=v["avgpool"],
            num_classes=num_classes,
            input_shape=tuple(input_shape),
            momentum=v["momentum"],
        )

    @classmethod
    def from_run(cls, path: str) -> "ExperimentConfig":
        try:
            return cls(resolve(path))
        except ConfigError as exc:
            raise DataFormatError(f"run config unreadable: {exc}") from None
