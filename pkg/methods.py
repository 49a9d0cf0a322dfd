"""
methods.py — Federated methods and how each one shares every piece of model state.

A sharing plan maps each state name to a rule:

    consensus   min-norm consensus of client updates (shared parameters)
    attention   similarity-aware attention over client parameters
    average     data-size-weighted mean (FedAvg)
    mean        unweighted mean
    local       stays with its client
"""

from __future__ import annotations

from dataclasses import dataclass

from config import DEFAULT_METHOD, METHOD_DEFS
from errors import ConfigError
from model import ParamPartition

RULES = ("consensus", "attention", "average", "mean", "local")


@dataclass(frozen=True)
class Method:
    name: str
    shared: str
    personalized: str
    bn_affine: str | None      # None: BN affine follows the shared/personalized split
    bn_stats: str | None       # None: BN_DSE stats local, BN_DFE stats unweighted mean
    regularized: bool
    adaptation: str | None     # unseen-domain procedure; None when the method has none


ALL_METHODS: dict[str, Method] = {d["name"]: Method(**d) for d in METHOD_DEFS}


def get_method(name: str = DEFAULT_METHOD) -> Method:
    method = ALL_METHODS.get(name)
    if method is None:
        raise ConfigError(f"unknown method {name!r}; expected one of {sorted(ALL_METHODS)}")
    return method


def _is_bn_affine(name: str) -> bool:
    return (".bn_dse." in name or ".bn_dfe." in name) and name.rsplit(".", 1)[-1] in ("weight", "bias")


def sharing_plan(
    method: Method,
    partition: ParamPartition,
    consensus: bool = True,
    personalize: bool = True,
) -> dict[str, str]:
    """Rule for every state name; ``consensus``/``personalize`` off swap in plain averages."""
    shared_rule = method.shared
    if shared_rule == "consensus" and not consensus:
        shared_rule = "average"
    personal_rule = method.personalized
    if personal_rule == "attention" and not personalize:
        personal_rule = "mean"

    plan: dict[str, str] = {}
    for name in sorted(partition.shared):
        plan[name] = shared_rule
    for name in sorted(partition.personalized):
        plan[name] = personal_rule
    if method.bn_affine is not None:
        for name in plan:
            if _is_bn_affine(name):
                plan[name] = method.bn_affine
    for name in sorted(partition.local_stats):
        plan[name] = "local" if method.bn_stats is None else method.bn_stats
    for name in sorted(partition.averaged_stats):
        plan[name] = "mean" if method.bn_stats is None else method.bn_stats
    return plan
