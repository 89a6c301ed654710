"""``subjectdp`` command line: run, sweep, account and plot.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import accountant as acct
from . import data, report
from .bounds import check_bounds
from .config import ConfigError, RunConfig, load, parse_override
from .federation import (
    FederationResult,
    TrainingSettings,
    describe_noise,
    make_round_plan,
    run_federation,
    stamp_configs,
)
from .models import ModelSpec, save_checkpoint
from .trainers import Algorithm

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


@dataclass
class Prepared:
    train: data.SubjectDataset
    evaluation: data.SubjectDataset
    layout: data.FederationLayout
    spec: ModelSpec


def _seeds(seed: int) -> tuple[int, int, int]:
    """Independent integer seeds for data generation, splitting and partitioning."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def prepare(cfg: RunConfig) -> Prepared:
    gen_seed, split_seed, part_seed = _seeds(cfg.seed)
    if cfg.source == "synthetic":
        registry = data.generate_synthetic(
            cfg.n_subjects, cfg.items_per_subject, cfg.d_in, cfg.synthetic_classes,
            seed=gen_seed, class_sep=cfg.class_sep, subject_offset=cfg.subject_offset,
        )
    else:
        schema = data.CsvSchema(cfg.subject_column, cfg.label_column, _feature_columns(cfg))
        registry = data.load_csv(cfg.csv_path, schema, cfg.num_classes or None)
    train, validation = data.train_validation_split(registry, cfg.validation_fraction, split_seed)
    if cfg.test_csv_path:
        evaluation = data.load_csv(
            cfg.test_csv_path,
            data.CsvSchema(cfg.subject_column, cfg.label_column, _feature_columns(cfg)),
            registry.num_classes,
        )
    else:
        evaluation = validation if len(validation) else train
    if cfg.partition == "uniform":
        layout = data.partition_uniform(train, cfg.n_users, part_seed)
    else:
        layout = data.partition_power(train, cfg.n_users, cfg.alpha, part_seed)
    spec = ModelSpec(cfg.model, registry.d_in, registry.num_classes, cfg.hidden,
                     bias=cfg.bias == "true")
    return Prepared(train, evaluation, layout, spec)


def _feature_columns(cfg: RunConfig) -> tuple[str, ...] | None:
    return tuple(c.strip() for c in cfg.feature_columns.split(",") if c.strip()) or None


def execute(cfg: RunConfig, out: Path, verbose: bool = False) -> dict:
    """Runs one configuration and writes its artifacts to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    prep = prepare(cfg)
    budget = acct.PrivacyBudget(cfg.epsilon, cfg.delta)
    settings = TrainingSettings(cfg.algorithm, cfg.B, cfg.T, cfg.C, cfg.eta, budget, cfg.subject_k)
    plan = make_round_plan(cfg.algorithm, cfg.rounds, cfg.users_per_round, cfg.horizontal_mode)
    configs = stamp_configs(prep.layout, settings, plan)

    def progress(r):
        if verbose:
            print(f"round {r.round + 1}/{plan.effective_rounds} "
                  f"accuracy={r.test_accuracy:.4f} loss={r.test_loss:.4f}", file=sys.stderr)

    result = run_federation(prep.layout, prep.spec, configs, plan, prep.evaluation,
                            cfg.seed, on_round=progress)
    audits = [a.to_json() for r in result.reports for a in r.audits]
    report.write_jsonl(out / report.ROUNDS_FILE, [r.to_json() for r in result.reports])
    report.write_jsonl(out / report.AUDITS_FILE, audits)
    report.write_csv(out / "rounds.csv", report.ROUNDS_HEADER,
                     [[report.TABLE_SCHEMA, r.round, r.test_loss, r.test_accuracy, len(r.audits)]
                      for r in result.reports])
    noise = describe_noise(configs, prep.layout, settings, plan)
    noise_doc = {
        "schema": "subjectdp.noise/1",
        "algorithm": settings.algorithm.value,
        "plan": {
            "configured_rounds": plan.total_rounds_configured,
            "effective_rounds": plan.effective_rounds,
            "accounted_rounds": plan.accounted_rounds,
            "users_per_round": plan.s,
            "mode": plan.mode.value,
            "per_round_epsilon": acct.apportion_per_round(cfg.epsilon, plan.accounted_rounds),
        },
        "users": [n.as_dict() for n in noise],
    }
    (out / report.NOISE_FILE).write_text(report.dump_json(noise_doc) + "\n")
    save_checkpoint(out / "model", prep.spec, result.params)
    if prep.spec.convex:
        _write_bounds(out, cfg, prep, result, plan, budget, audits)

    zs = [a["observed_Z"] for a in audits if a["observed_Z"] is not None]
    sigmas = [n.sigma for n in noise if n.sigma is not None]
    last = result.reports[-1] if result.reports else None
    summary = {
        "schema": "subjectdp.summary/1",
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "effective_rounds": plan.effective_rounds,
        "final_test_accuracy": last.test_accuracy if last else None,
        "final_test_loss": last.test_loss if last else None,
        "mean_observed_Z": float(np.mean(zs)) if zs else None,
        "mean_sigma": float(np.mean(sigmas)) if sigmas else None,
    }
    (out / report.SUMMARY_FILE).write_text(report.dump_json(summary) + "\n")
    return summary


def _write_bounds(out, cfg: RunConfig, prep: Prepared, result: FederationResult, plan, budget,
                  audits) -> None:
    sizes = [len(d) for d in prep.layout.user_datasets]
    q = min(cfg.B / float(np.mean(sizes)), 1.0)
    zs = [a["observed_Z"] for a in audits if a["observed_Z"] is not None]
    k = float(max(zs)) if zs else 1.0
    if cfg.algorithm == Algorithm.HIGRADAVG_DP.value:
        k = float(data.max_subject_cardinality(prep.train))
    checks = check_bounds(prep.spec, prep.train, result.initial_params, result.params,
                          eta=cfg.eta, steps=cfg.T * plan.effective_rounds, budget=budget,
                          q=q, k=k, m=cfg.B)
    rows = []
    for c in checks:
        x = c.inputs
        rows.append([report.TABLE_SCHEMA, c.bound, c.value, x.L, x.M, x.eta, x.T, x.n, x.d,
                     x.epsilon, x.delta, x.k, x.q, x.m, c.excess_loss])
    report.write_csv(out / report.BOUNDS_FILE, report.BOUNDS_HEADER, rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load(args, extra: list[str] = ()) -> RunConfig:
    overrides = list(args.override or []) + list(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    return load(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = execute(cfg, Path(args.out), verbose=args.verbose)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def parse_sweep(specs: list[str]) -> list[list[str]]:
    """``section.key=v1,v2`` specs -> cross product of override lists."""
    axes = []
    for spec in specs:
        name, sep, values = spec.partition("=")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not sep or not vals:
            raise ConfigError([f"sweep {spec!r}: expected section.key=v1,v2,..."])
        parse_override(f"{name}={vals[0]}")
        axes.append([f"{name.strip()}={v}" for v in vals])
    return [list(combo) for combo in itertools.product(*axes)]


def cmd_sweep(args) -> int:
    combos = parse_sweep(args.sweep or [])
    configs = [_load(args, combo) for combo in combos]  # validate all before running any
    out = Path(args.out)
    rows = []
    for i, (combo, cfg) in enumerate(zip(combos, configs)):
        summary = execute(cfg, out / f"run_{i:03d}", verbose=args.verbose)
        rows.append([report.TABLE_SCHEMA, f"run_{i:03d}", ";".join(combo), cfg.algorithm,
                     cfg.seed, summary["effective_rounds"], summary["final_test_accuracy"],
                     summary["final_test_loss"], summary["mean_observed_Z"],
                     summary["mean_sigma"]])
    report.write_csv(out / "sweep.csv", report.SWEEP_HEADER, rows)
    print(report.render_table(report.SWEEP_HEADER, rows), end="")
    return EXIT_OK


def account_plan(args) -> acct.NoisePlan:
    budget = acct.PrivacyBudget(args.epsilon, args.delta)
    budget.check_target()
    hp = acct.plan_horizontal(args.rounds, args.users_per_round, args.mode)
    steps = args.batches * args.rounds * hp.step_multiplier
    if args.userldp:
        sigma = acct.userldp_sigma(budget, steps).sigma
        q = 1.0
    else:
        q = args.q
        sigma = acct.solve_sigma(budget, acct.AccountingParams(
            q, steps, group_size=args.group_size, subject_multiplier=args.subject_multiplier))
    return acct.NoisePlan(
        sigma=sigma,
        per_round_epsilon=acct.apportion_per_round(args.epsilon, args.rounds),
        effective_rounds=hp.effective_rounds,
        mode=hp.mode,
        configured_rounds=args.rounds,
        steps=steps,
        q=q,
        group_size=args.group_size,
        subject_multiplier=args.subject_multiplier,
    )


def cmd_account(args) -> int:
    plan = account_plan(args).as_dict()
    for key, value in plan.items():
        print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    print(json.dumps(plan, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(args.runs[0]) / "figures"
    written = report.plot_runs([Path(r) for r in args.runs], out)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjectdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p):
        p.add_argument("--config", required=True, help="run configuration (.cfg)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration field; repeatable")
        p.add_argument("--verbose", action="store_true", help="print per-round progress")

    p = sub.add_parser("run", help="run one configuration")
    run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the cross product of overrides")
    run_args(p)
    p.add_argument("--sweep", action="append", metavar="SECTION.KEY=V1,V2",
                   help="values to sweep for one field; repeatable")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("account", help="print the noise plan for a budget")
    p.add_argument("--epsilon", type=float, default=4.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--rounds", type=int, default=100, help="configured rounds R")
    p.add_argument("--users-per-round", type=int, default=1, help="users sampled per round s")
    p.add_argument("--mode", choices=[m.value for m in acct.HorizontalMode],
                   default=acct.HorizontalMode.ROUND_REDUCTION.value)
    p.add_argument("--q", type=float, default=0.01, help="sampling fraction B/|D|")
    p.add_argument("--batches", type=int, default=100, help="minibatches per round T")
    p.add_argument("--group-size", "-k", type=int, default=1)
    p.add_argument("--subject-multiplier", type=float, default=1.0)
    p.add_argument("--userldp", action="store_true",
                   help="calibrate for UserLDP (q=1 plus the randomized-response floor)")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("plot", help="draw figures for run directories")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="figure directory (default: <first run>/figures)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            return _dispatch(args)
        finally:
            for message in dict.fromkeys(str(w.message) for w in caught):
                print(f"warning: {message}", file=sys.stderr)


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (acct.BudgetInfeasibleError, ValueError) as exc:
        if isinstance(exc, data.DataFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported via exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
