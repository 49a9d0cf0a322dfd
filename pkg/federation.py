"""
federation.py — Rounds of broadcast, local training and aggregation, and the run orchestrator.

The server keeps a bank with one full state dict per client: what that client
holds when the next round starts. Aggregation writes into the bank according
to the method's sharing plan, so shared entries become identical across
clients while personalized and local ones may differ.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from tqdm import tqdm

from aggregation import (
    AggregationReport,
    aggregate_bn_stats,
    attention_aggregate,
    consensus_aggregate,
    weighted_average,
)
from client import ClientState, LocalResult, TrainerConfig, local_train
from config import BUNDLE_FORMAT
from errors import AlignmentError, ConfigError
from evaluation import EvalResult, evaluate
from history import ClientRoundMetrics, RoundHistory, RoundMetrics
from methods import Method, get_method, sharing_plan
from model import ArchitectureSpec, DecomposedModel, build_model, count_params, count_undecomposed
from run_recorder import RunRecorder
from schedule import LearningRateSchedule
from serialization import read_bundle, write_bundle
from synthetic_domains import LabeledDataset
from utils import generator_state, restore_generator, spawn_generators

logger = logging.getLogger(__name__)

BASELINES = ("fedavg", "fedbn", "local")


@dataclass
class ServerState:
    round: int
    bank: list[dict[str, np.ndarray]]
    schedule: LearningRateSchedule

    @property
    def lr(self) -> float:
        return self.schedule.at(self.round)

    def global_state(self, plan: dict[str, str]) -> dict[str, np.ndarray]:
        """Entries every client shares (consensus / average / mean rules)."""
        if not self.bank:
            return {}
        return {n: self.bank[0][n] for n, rule in plan.items() if rule in ("consensus", "average", "mean")}


# ── One round ───────────────────────────────────────────────────────────────

def run_clients(fn: Callable[[ClientState], LocalResult], clients: Sequence[ClientState],
                executor: ThreadPoolExecutor | None = None) -> list[LocalResult]:
    """Results in client order regardless of how tasks are scheduled."""
    if executor is None:
        return [fn(c) for c in clients]
    return list(executor.map(fn, clients))


def aggregate_states(
    plan: dict[str, str],
    bank: Sequence[dict[str, np.ndarray]],
    results: Sequence[LocalResult],
    cfg: TrainerConfig,
    round_index: int,
    stat_names: frozenset[str] = frozenset(),
) -> tuple[list[dict[str, np.ndarray]], AggregationReport]:
    """New bank from the broadcast bank and the clients' trained states."""
    report = AggregationReport(round_index)
    new_bank = [dict(state) for state in bank]
    active = [k for k, r in enumerate(results) if not r.skipped]
    if not active:
        logger.warning(f"Round {round_index}: no client trained; states unchanged")
        return new_bank, report
    after = [results[k].state for k in active]
    sizes = [results[k].num_samples for k in active]

    def broadcast(name: str, value: np.ndarray) -> None:
        for state in new_bank:
            state[name] = value.copy()

    by_rule: dict[str, list[str]] = {}
    for name, rule in plan.items():
        by_rule.setdefault(rule, []).append(name)

    consensus_names = by_rule.get("consensus", [])
    if consensus_names:
        updates = [{n: s[n].astype(np.float64) - bank[k][n] for n in consensus_names} for k, s in zip(active, after)]
        deltas, report.layers = consensus_aggregate(updates, consensus_names, cfg.consensus_granularity)
        for name, delta in deltas.items():
            base = bank[active[0]][name]
            broadcast(name, (base.astype(np.float64) + delta).astype(base.dtype))

    for name in by_rule.get("average", []):
        broadcast(name, weighted_average([s[name] for s in after], sizes))

    stats_mean = [n for n in by_rule.get("mean", []) if n in stat_names]
    stats_local = [n for n in by_rule.get("local", []) if n in stat_names]
    if stats_mean or stats_local:
        client_stats = [{n: s[n] for n in stats_mean + stats_local} for s in after]
        _, per_client = aggregate_bn_stats(client_stats, stats_mean)
        for k, stats in zip(active, per_client):
            new_bank[k].update(stats)
        for name in stats_mean:
            broadcast(name, new_bank[active[0]][name])

    for name in by_rule.get("mean", []):
        if name not in stat_names:
            broadcast(name, weighted_average([s[name] for s in after]))

    for name in by_rule.get("attention", []):
        outputs, matrix = attention_aggregate([s[name] for s in after], cfg.tau)
        report.attention[name] = matrix
        for k, value in zip(active, outputs):
            new_bank[k][name] = value

    for name in by_rule.get("local", []):
        if name not in stat_names:
            for k, s in zip(active, after):
                new_bank[k][name] = s[name].copy()
    return new_bank, report


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    template: DecomposedModel,
    plan: dict[str, str],
    cfg: TrainerConfig,
    regularized: bool = False,
    executor: ThreadPoolExecutor | None = None,
) -> tuple[ServerState, list[LocalResult], AggregationReport]:
    if len(clients) != len(server.bank):
        raise AlignmentError(f"{len(clients)} clients but {len(server.bank)} banked states")
    lr = server.lr
    for client, state in zip(clients, server.bank):
        client.state = {n: v.copy() for n, v in state.items()}
    results = run_clients(lambda c: local_train(c, template, cfg, lr, regularized), clients, executor)
    stat_names = template.partition.local_stats | template.partition.averaged_stats
    bank, report = aggregate_states(plan, server.bank, results, cfg, server.round + 1, stat_names)
    return ServerState(server.round + 1, bank, server.schedule), results, report


def run_round_fdse(server: ServerState, clients: Sequence[ClientState], template: DecomposedModel,
                   cfg: TrainerConfig, executor: ThreadPoolExecutor | None = None):
    """Consensus on shared parameters, attention on DSE parameters, BN_DSE stats local."""
    plan = sharing_plan(get_method("fdse"), template.partition, cfg.consensus, cfg.personalize)
    return run_round(server, clients, template, plan, cfg, cfg.lam > 0, executor)


def run_round_baseline(method: str, server: ServerState, clients: Sequence[ClientState],
                       template: DecomposedModel, cfg: TrainerConfig,
                       executor: ThreadPoolExecutor | None = None) -> tuple[ServerState, list[LocalResult]]:
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    plan = sharing_plan(get_method(method), template.partition)
    server, results, _ = run_round(server, clients, template, plan, cfg, False, executor)
    return server, results


# ── Orchestrator ────────────────────────────────────────────────────────────

def assemble(template: DecomposedModel, state: dict[str, np.ndarray]) -> DecomposedModel:
    model = template.clone()
    model.load_state(state)
    return model


def mean_state(plan: dict[str, str], bank: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """State for a client that never trained: shared entries as held, the rest averaged uniformly."""
    state = {}
    for name in bank[0]:
        if plan.get(name) in ("local", "attention"):
            state[name] = weighted_average([s[name] for s in bank])
        else:
            state[name] = bank[0][name].copy()
    return state


@dataclass
class RunStatus:
    completed: bool = False
    interrupted: bool = False
    best_round: int | None = None
    extra: dict = field(default_factory=dict)


class Federation:
    """Owns the clients, the server bank and the run history; drives rounds to completion."""

    def __init__(self, cfg: TrainerConfig, arch: ArchitectureSpec, datasets: Sequence[LabeledDataset],
                 recorder: RunRecorder | None = None) -> None:
        cfg.validate()
        if not datasets:
            raise ConfigError("federation needs at least one client dataset")
        self.cfg = cfg
        self.arch = arch
        self.method: Method = get_method(cfg.method)
        self.recorder = recorder

        streams = spawn_generators(cfg.seed, len(datasets) + 1)
        self.template = build_model(arch, streams[0])
        self.plan = sharing_plan(self.method, self.template.partition, cfg.consensus, cfg.personalize)
        self.regularized = self.method.regularized and cfg.lam > 0 and self.template.has_dse

        initial = self.template.state_dict()
        self.clients = [
            ClientState(k, ds, rng, {}, cfg.local_epochs)
            for k, (ds, rng) in enumerate(zip(datasets, streams[1:]))
        ]
        self.server = ServerState(0, [{n: v.copy() for n, v in initial.items()} for _ in datasets],
                                  LearningRateSchedule(cfg.lr, cfg.lr_decay))
        self.history = RoundHistory()
        self.status = RunStatus()
        self._round_start: tuple[ServerState, list[dict]] | None = None

    # ── Models ──────────────────────────────────────────────────────────

    def client_models(self) -> list[DecomposedModel]:
        return [assemble(self.template, state) for state in self.server.bank]

    def unseen_model(self) -> DecomposedModel:
        return assemble(self.template, mean_state(self.plan, self.server.bank))

    def param_counts(self) -> dict:
        return {
            "decomposed": count_params(self.template).to_dict(),
            "undecomposed": count_undecomposed(self.arch).to_dict(),
        }

    # ── Rounds ──────────────────────────────────────────────────────────

    def evaluate_round(self, lr: float, results: Sequence[LocalResult] | None = None,
                       report: AggregationReport | None = None) -> RoundMetrics:
        models = self.client_models()
        val: EvalResult = evaluate(models, [c.dataset.val for c in self.clients], self.cfg.batch_size)
        test: EvalResult = evaluate(models, [c.dataset.test for c in self.clients], self.cfg.batch_size)
        metrics = RoundMetrics(self.server.round, lr, val_all=val.all, val_avg=val.avg,
                               test_all=test.all, test_avg=test.avg)
        for k, client in enumerate(self.clients):
            result = results[k] if results is not None else None
            metrics.clients.append(ClientRoundMetrics(
                client_id=client.client_id,
                domain=client.domain_id,
                train_loss=result.train_loss if result else None,
                con_loss=result.con_loss if result else None,
                val_acc=val.per_client[k],
                test_acc=test.per_client[k],
                skipped=result.skipped if result else False,
                con_layers=list(result.con_layers) if result and result.con_layers else None,
            ))
        if report is not None and report.layers:
            metrics.min_dot = report.min_dot()
        return metrics

    def _record(self, metrics: RoundMetrics, report: AggregationReport | None) -> None:
        improved = self.history.add(metrics)
        if self.recorder is None:
            return
        self.recorder.append_metrics(metrics)
        if report is not None and self.method.name == "fdse":
            self.recorder.append_aggregation(report.to_dict())
        if improved:
            self.save_checkpoint(self.recorder.best_dir)

    def step(self, executor: ThreadPoolExecutor | None = None) -> RoundMetrics:
        lr = self.server.lr
        self._round_start = (self.server, [generator_state(c.rng) for c in self.clients])
        self.server, results, report = run_round(
            self.server, self.clients, self.template, self.plan, self.cfg, self.regularized, executor
        )
        metrics = self.evaluate_round(lr, results, report)
        self._record(metrics, report)
        logger.info(
            f"Round {metrics.round}: val AVG {metrics.val_avg:.2f}, test ALL {metrics.test_all:.2f}, "
            f"test AVG {metrics.test_avg:.2f}"
        )
        every = self.cfg.checkpoint_every
        if self.recorder is not None and every and self.server.round % every == 0:
            self.save_checkpoint(self.recorder.checkpoint_dir(self.server.round))
        self._round_start = None
        return metrics

    def run(self, progress: bool = False) -> RoundHistory:
        """Evaluate the initial model (round 0) if needed, then train until ``cfg.rounds``."""
        if not self.history.rounds:
            self._record(self.evaluate_round(self.server.lr), None)
        executor = ThreadPoolExecutor(self.cfg.parallel_clients) if self.cfg.parallel_clients > 1 else None
        remaining = range(self.server.round, self.cfg.rounds)
        try:
            for _ in tqdm(remaining, desc=self.method.name, unit="round", disable=not progress):
                self.step(executor)
        except KeyboardInterrupt:
            self.status.interrupted = True
            if self._round_start is not None:
                # an unfinished round is discarded along with its random draws
                self.server, states = self._round_start
                for client, state in zip(self.clients, states):
                    client.rng = restore_generator(state)
                self._round_start = None
                self.history.truncate(self.server.round)
            if self.recorder is not None:
                path = self.recorder.checkpoint_dir(self.server.round)
                self.save_checkpoint(path)
                logger.warning(f"Interrupted after round {self.server.round}; resumable checkpoint at {path}")
            raise
        finally:
            if executor is not None:
                executor.shutdown()
        self.status.completed = True
        best = self.history.best()
        self.status.best_round = best.round if best else None
        return self.history

    # ── Checkpoints ─────────────────────────────────────────────────────

    def save_checkpoint(self, directory: str) -> None:
        arrays = {}
        for k, state in enumerate(self.server.bank):
            for name, value in state.items():
                arrays[f"client{k}/{name}"] = value
        meta = {
            "round": self.server.round,
            "method": self.method.name,
            "num_clients": len(self.clients),
            "domains": [c.domain_id for c in self.clients],
            "rng": [generator_state(c.rng) for c in self.clients],
        }
        write_bundle(directory, "state", arrays, meta)
        logger.debug(f"Checkpoint for round {self.server.round} written to {directory}")

    def load_checkpoint(self, directory: str) -> int:
        """Restore bank, round and client streams; returns the restored round."""
        arrays, meta = read_bundle(directory, "state")
        if meta.get("method") != self.method.name or meta.get("num_clients") != len(self.clients):
            raise ConfigError(
                f"checkpoint {directory} is for {meta.get('method')!r} with {meta.get('num_clients')} clients"
            )
        bank = [dict() for _ in self.clients]
        for key, value in arrays.items():
            k, _, name = key.partition("/")
            bank[int(k[len("client"):])][name] = value
        expected = set(self.template.state_dict())
        for k, state in enumerate(bank):
            if set(state) != expected:
                raise AlignmentError(f"checkpoint client {k} state does not match the model")
        for client, state in zip(self.clients, meta.get("rng", [])):
            client.rng = restore_generator(state)
        self.server = ServerState(int(meta["round"]), bank, self.server.schedule)
        logger.info(f"Restored round {self.server.round} from {directory}")
        return self.server.round

    def resume(self, directory: str) -> None:
        """Continue from a checkpoint; metrics recorded after it are discarded."""
        restored = self.load_checkpoint(directory)
        self.history = RoundHistory()
        if self.recorder is not None:
            self.recorder.reset_streams(keep_through=restored)
            for metrics in self.recorder.read_metrics():
                self.history.add(metrics)

    # ── Summary ─────────────────────────────────────────────────────────

    def summary(self) -> dict:
        best = self.history.best()
        last = self.history.last()

        def scores(m: RoundMetrics | None) -> dict | None:
            if m is None:
                return None
            return {"round": m.round, "val_all": m.val_all, "val_avg": m.val_avg,
                    "test_all": m.test_all, "test_avg": m.test_avg,
                    "per_domain": {str(c.domain): c.test_acc for c in m.clients}}

        return {
            "format": BUNDLE_FORMAT,
            "method": self.method.name,
            "rounds": self.server.round,
            "seed": self.cfg.seed,
            "domains": [c.domain_id for c in self.clients],
            "best": scores(best),
            "final": scores(last),
            "params": self.param_counts(),
            "completed": self.status.completed,
        }
