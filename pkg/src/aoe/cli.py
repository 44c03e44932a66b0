"""Command-line front end for running and reporting benchmark experiments."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    DataError,
    ExperimentConfig,
    default_config,
    load_config,
    run_experiment,
    summarize_experiment,
)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config (defaults to a synthetic demo)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--experiment", help="experiment name (overrides config)")
    parser.add_argument("--budget", type=int, help="deployments per run (overrides config)")
    parser.add_argument("--n-runs", type=int, help="seeded repetitions per method (overrides config)")
    parser.add_argument("--methods", help="comma-separated method list (overrides config)")
    parser.add_argument("--master-seed", type=int, help="seed all runs derive from (overrides config)")
    parser.add_argument("--n-workers", type=int, help="threads running repetitions in parallel (overrides config)")
    parser.add_argument("--quiet", action="store_true", help="suppress per-run progress lines")


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.experiment is not None:
        changes["experiment"] = args.experiment
    if args.budget is not None:
        changes["budget"] = args.budget
    if args.n_runs is not None:
        changes["n_runs"] = args.n_runs
    if args.methods is not None:
        changes["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.master_seed is not None:
        changes["master_seed"] = args.master_seed
    if args.n_workers is not None:
        changes["n_workers"] = args.n_workers
    return dataclasses.replace(config, **changes) if changes else config


def _run_kind(kind: str, args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else default_config(kind)
    if config.kind != kind:
        raise ConfigError(f"config is for kind {config.kind!r}, but this command runs {kind!r}")
    config = _apply_overrides(config, args)
    exp_dir = run_experiment(config, verbose=not args.quiet)
    print(f"wrote {exp_dir}")
    return 0


def _cmd_run_classification(args: argparse.Namespace) -> int:
    return _run_kind("classification", args)


def _cmd_run_recsys(args: argparse.Namespace) -> int:
    return _run_kind("recsys", args)


def _cmd_report(args: argparse.Namespace) -> int:
    rows = summarize_experiment(Path(args.out) / args.experiment)
    print(f"{'method':<12} {'iter':>4} {'gap':>18} {'rmse':>18}")
    for row in rows:
        gap = f"{row['gap_mean']:.4f} ± {row['gap_std']:.4f}"
        rmse = f"{row['rmse_mean']:.4f} ± {row['rmse_std']:.4f}"
        print(f"{row['method']:<12} {row['iteration']:>4} {gap:>18} {rmse:>18}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    print(
        f"ok: {config.experiment} ({config.kind}) methods={','.join(config.methods)} "
        f"budget={config.budget} n_runs={config.n_runs}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="aoe",
        description="Run sequential candidate-selection benchmarks and summarize them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_cls = sub.add_parser("run-classification", help="benchmark on a classifier-selection problem")
    _add_run_flags(run_cls)
    run_cls.set_defaults(func=_cmd_run_classification)

    run_rec = sub.add_parser("run-recsys", help="benchmark on a recommender-selection problem")
    _add_run_flags(run_rec)
    run_rec.set_defaults(func=_cmd_run_recsys)

    report = sub.add_parser("report", help="recompute and print the summary for a finished experiment")
    report.add_argument("--out", default="out", help="output directory the experiment was written to")
    report.add_argument("--experiment", required=True, help="experiment name under the output directory")
    report.set_defaults(func=_cmd_report)

    validate = sub.add_parser("validate-config", help="check a config file and exit")
    validate.add_argument("--config", required=True)
    validate.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
