"""
main.py — Entry point for the Domain Shift Eraser federated simulator.

Run with:
    python main.py generate --output data/synth_domains_4
    python main.py train --method fdse --dataset data/synth_domains_4 --output runs/fdse
    python main.py adapt runs/fdse --target 3
    python main.py report runs/fdse runs/fedavg
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any

import numpy as np

import experiment_config
from adaptation import adapt_model
from config import (
    CONFIG_FILE,
    EXIT_INTERRUPTED,
    EXIT_OK,
    LOG_FORMAT,
)
from errors import NotApplicableError, SimulatorError, UnknownDomainError
from evaluation import count_correct, summarize
from experiment_config import ExperimentConfig
from federation import Federation
from methods import get_method
from report import comparison_rows, format_table, load_run, per_domain_series, write_report
from run_recorder import RunRecorder, prepare_directory, resolve_output
from synthetic_domains import (
    default_domains,
    generate_benchmark,
    load_benchmark,
    shift_diagnostics,
    write_benchmark,
)
from tensor import set_default_dtype
from utils import spawn_generators

logger = logging.getLogger("fdse")


# ── Subcommands ─────────────────────────────────────────────────────────────

def cmd_generate(args: argparse.Namespace) -> int:
    values = experiment_config.resolve(args.config, {
        "num_domains": args.domains, "data_seed": args.seed, "dataset": args.output,
    })
    cfg = ExperimentConfig(values)
    root = resolve_output(values["dataset"])
    prepare_directory(root, args.force)

    datasets = generate_benchmark(
        default_domains(values["num_domains"]),
        values["num_classes"],
        values["samples_per_class"],
        cfg.sample_shape(),
        values["data_seed"],
        values["class_noise"],
    )
    meta = {k: values[k] for k in ("num_domains", "num_classes", "samples_per_class",
                                   "image_size", "class_noise", "data_seed")}
    write_benchmark(datasets, root, meta)
    experiment_config.write(values, os.path.join(root, CONFIG_FILE))

    print(f"Wrote {len(datasets)} domains to {root}")
    for row in shift_diagnostics(datasets):
        print(f"  domain {row['domain']}: mean {row['mean']:+.3f}  std {row['std']:.3f}  "
              f"class shift vs domain 0 {row['class_shift']:.2f} pooled std")
    return EXIT_OK


def _training_domains(values: dict[str, Any], root: str):
    manifest, _ = load_benchmark(root, [])
    available = [int(d) for d in manifest["domains"]]
    unknown = [d for d in values["holdout"] if d not in available]
    if unknown:
        raise UnknownDomainError(f"holdout domains {unknown} not in the dataset; available: {available}")
    ids = [d for d in available if d not in values["holdout"]]
    return load_benchmark(root, ids)


def _build_federation(cfg: ExperimentConfig, recorder: RunRecorder | None) -> Federation:
    set_default_dtype(cfg.values["dtype"])
    root = resolve_output(cfg.values["dataset"])
    manifest, datasets = _training_domains(cfg.values, root)
    arch = cfg.architecture(tuple(manifest["feature_shape"]), int(manifest["num_classes"]))
    return Federation(cfg.trainer, arch, datasets, recorder)


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume:
        run_dir = resolve_output(args.resume)
        cfg = ExperimentConfig.from_run(os.path.join(run_dir, CONFIG_FILE))
    else:
        cfg = ExperimentConfig(experiment_config.resolve(args.config, {
            "method": args.method, "rounds": args.rounds, "dataset": args.dataset,
            "output_dir": args.output, "seed": args.seed, "parallel_clients": args.parallel_clients,
            "lam": args.lam, "tau": args.tau, "expansion": args.expansion,
        }))
        run_dir = resolve_output(cfg.values["output_dir"])
        prepare_directory(run_dir, args.force)

    recorder = RunRecorder(run_dir)
    federation = _build_federation(cfg, recorder)
    if args.resume:
        checkpoint = recorder.latest_checkpoint()
        if checkpoint is None:
            raise NotApplicableError(f"{run_dir} has no checkpoint to resume from")
        federation.resume(checkpoint)
    else:
        recorder.reset_streams()
        recorder.write_config(cfg.values)

    counts = federation.param_counts()
    logger.info(
        f"Parameters: {counts['decomposed']['total']} decomposed "
        f"({counts['decomposed']['personalized']} personalized) vs {counts['undecomposed']['total']} undecomposed"
    )
    try:
        federation.run(progress=not args.quiet)
    finally:
        recorder.write_summary(federation.summary())

    best = federation.history.best()
    print(f"{federation.method.name}: best round {best.round}, test ALL {best.test_all:.2f}, "
          f"test AVG {best.test_avg:.2f} (val AVG {best.val_avg:.2f})")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    run_dir = resolve_output(args.run_dir)
    cfg = ExperimentConfig.from_run(os.path.join(run_dir, CONFIG_FILE))
    method = get_method(cfg.values["method"])
    if args.method and args.method != method.name:
        raise NotApplicableError(f"run {run_dir} was trained with {method.name!r}, not {args.method!r}")

    recorder = RunRecorder(run_dir)
    federation = _build_federation(cfg, None)
    federation.load_checkpoint(recorder.best_dir)

    root = resolve_output(cfg.values["dataset"])
    manifest, _ = load_benchmark(root, [])
    if args.target not in [int(d) for d in manifest["domains"]]:
        raise UnknownDomainError(f"unknown target domain {args.target}; available: {manifest['domains']}")
    if args.target in [c.domain_id for c in federation.clients]:
        logger.warning(f"Domain {args.target} took part in training; it is not unseen")
    _, (target,) = load_benchmark(root, [args.target])

    values = dict(cfg.values)
    if args.epochs is not None:
        values["adapt_epochs"] = args.epochs
    epochs = values["adapt_epochs"]
    lr = values["adapt_lr_scale"] * values["lr"]
    model = federation.unseen_model()
    split = target.test
    before = summarize([count_correct(model, split)], [len(split)]).all
    rng = spawn_generators(values["seed"], 1)[0]
    result = adapt_model(method, model, split.features, epochs, lr, rng, values["batch_size"],
                         values["beta"], values["momentum"], values["clip_norm"])
    after = summarize([count_correct(result.model, split)], [len(split)]).all

    payload = {
        "method": method.name,
        "target": args.target,
        "epochs": epochs,
        "lr": lr,
        "before": before,
        "after": after,
        "con_trace": result.con_trace,
        "rejected_epochs": result.rejected_epochs,
    }
    recorder.write_json(f"adapt_{args.target}.json", payload)
    recorder.write_config(values, f"adapt_{args.target}.yaml")
    print(f"{method.name} on unseen domain {args.target}: {before:.2f} -> {after:.2f}")
    if result.con_trace:
        print("  L_Con trace: " + ", ".join(f"{v:.5f}" for v in result.con_trace))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    runs = [load_run(resolve_output(path)) for path in args.run_dirs]
    rows = comparison_rows(runs)
    print(format_table(rows))
    if len(runs) > 1:
        by_method: dict[str, list[float]] = {}
        for row in rows:
            if row["test_avg"] is not None:
                by_method.setdefault(row["method"], []).append(row["test_avg"])
        for name, scores in sorted(by_method.items()):
            print(f"  {name}: mean AVG {np.mean(scores):.2f} over {len(scores)} runs")
    out = resolve_output(args.output)
    write_report(out, rows, per_domain_series(runs))
    logger.info(f"Report written to {out}")
    return EXIT_OK


# ── Argument parsing ────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdse", description="Federated Domain Shift Eraser simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bar")
    parser.add_argument("--show-config", action="store_true", help="print every config key and exit")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("generate", help="write a synthetic multi-domain dataset")
    gen.add_argument("--config", help="YAML config file")
    gen.add_argument("--output", help="dataset directory")
    gen.add_argument("--domains", type=int, help="number of domains")
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="run federated training")
    train.add_argument("--config", help="YAML config file")
    train.add_argument("--method", help="fdse | fedavg | fedbn | local")
    train.add_argument("--rounds", type=int)
    train.add_argument("--dataset")
    train.add_argument("--output", help="run directory")
    train.add_argument("--seed", type=int)
    train.add_argument("--parallel-clients", type=int)
    train.add_argument("--lam", type=float)
    train.add_argument("--tau", type=float)
    train.add_argument("--expansion", type=int)
    train.add_argument("--resume", metavar="RUN_DIR", help="continue a run from its latest checkpoint")
    train.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    train.set_defaults(func=cmd_train)

    adapt = sub.add_parser("adapt", help="adapt a trained run to an unseen domain")
    adapt.add_argument("run_dir")
    adapt.add_argument("--target", type=int, required=True, help="target domain id")
    adapt.add_argument("--method", help="expected training method of the run")
    adapt.add_argument("--epochs", type=int, help="adaptation epochs")
    adapt.set_defaults(func=cmd_adapt)

    report = sub.add_parser("report", help="compare run directories")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--output", default="report", help="directory for report.json and the series CSV")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)

    if args.show_config:
        print(experiment_config.describe())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_OK
    try:
        return args.func(args)
    except SimulatorError as exc:
        logger.error(str(exc))
        return exc.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
