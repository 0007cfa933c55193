"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    DivergenceError,
    FixtureError,
    RunConfig,
    aggregate_trials,
    hyperparameter_sweep,
    landscape_demo,
    load_config,
    model_selection,
    prepare_run,
    run_experiment,
    run_leave_one_out,
    write_sweep_csv,
)
from .sharpness import gap_profile


def _parse_radii(text: str) -> list[float]:
    try:
        radii = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad radii list {text!r}") from exc
    if not radii:
        raise ConfigError("radii list is empty")
    return radii


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg)
    out = args.output or cfg.output or str(Path(args.config).with_suffix("")) + "_run.json"
    result.save(out)
    print(
        f"rule={cfg.rule} target={cfg.train.target_index} seed={cfg.train.seed} "
        f"val_acc={result.best_val_accuracy:.4f} target_acc={result.best_target_accuracy:.4f} "
        f"gap={result.final_gap:.6g} -> {out}"
    )
    return 0


def _cmd_sweep(args) -> int:
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {args.config}: {exc}") from exc
    if not isinstance(raw, dict) or "base" not in raw or "grid" not in raw:
        raise ConfigError("sweep config needs 'base' and 'grid' sections")
    unknown = set(raw) - {"base", "grid", "output"}
    if unknown:
        raise ConfigError(f"unknown sweep config keys: {sorted(unknown)}")
    base = RunConfig.from_dict(raw["base"])
    rows = hyperparameter_sweep(base, raw["grid"])
    out = args.output or raw.get("output") or str(Path(args.config).with_suffix("")) + "_sweep.csv"
    write_sweep_csv(rows, out)
    chosen = model_selection(rows)
    print(f"{len(rows)} sweep rows -> {out}; selected config_id={chosen}")
    return 0


def _cmd_loo(args) -> int:
    cfg = load_config(args.config)
    result = run_leave_one_out(cfg, n_seeds=args.seeds)
    out_dir = Path(args.output_dir or (cfg.output or "loo_runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    for target, seed, run in result.runs:
        run.save(out_dir / f"target{target}_seed{seed}.json")
    summary = out_dir / "loo_summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_domain", "mean_target_accuracy", "stderr"])
        for target in sorted(result.per_target):
            mean, stderr = result.per_target[target]
            writer.writerow([target, f"{mean:.6f}", f"{stderr:.6f}"])
        writer.writerow(["overall", f"{result.overall[0]:.6f}", f"{result.overall[1]:.6f}"])
    for target in sorted(result.per_target):
        mean, stderr = result.per_target[target]
        print(f"target {target}: {100 * mean:.2f} +/- {100 * stderr:.2f}")
    print(f"overall: {100 * result.overall[0]:.2f} +/- {100 * result.overall[1]:.2f} -> {summary}")
    return 0


def _cmd_sharpness(args) -> int:
    with open(args.run_output) as fh:
        payload = json.load(fh)
    if "config" not in payload or "best_theta" not in payload:
        raise ConfigError(f"{args.run_output} is not a run output file")
    cfg = RunConfig.from_dict(payload["config"])
    prep = prepare_run(cfg)
    theta = np.asarray(payload["best_theta"], dtype=np.float64)
    profile = gap_profile(prep.objective, theta, prep.train_batch, _parse_radii(args.radii))
    out = args.output or str(Path(args.run_output).with_suffix("")) + "_sharpness.csv"
    profile.write_csv(out)
    print(
        f"rule={cfg.rule} target={cfg.train.target_index} "
        f"lambda_max={profile.lambda_max:.6g} -> {out}"
    )
    return 0


def _cmd_landscape(args) -> int:
    report = landscape_demo(rho=args.rho)
    print(f"sharp minimum at {report.sharp_minimum:+.6f}: "
          f"loss={report.loss['sharp']:.6f} perturbed={report.perturbed_loss['sharp']:.6f} "
          f"gap={report.gap['sharp']:.6f}")
    print(f"flat  minimum at {report.flat_minimum:+.6f}: "
          f"loss={report.loss['flat']:.6f} perturbed={report.perturbed_loss['flat']:.6f} "
          f"gap={report.gap['flat']:.6f}")
    print(f"perturbed loss prefers the sharp minimum: {report.sam_prefers_sharp}")
    print(f"gap flags the sharp minimum:              {report.gap_flags_sharp}")
    for rule, frac in report.flat_fraction.items():
        print(f"{rule}: {frac:.3f} of initializations reach the flat basin")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        print(f"-> {args.output}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.dir)
    runs = []
    for path in sorted(run_dir.glob("*.json")):
        with open(path) as fh:
            payload = json.load(fh)
        if isinstance(payload, dict) and "config" in payload and "final" in payload:
            runs.append(payload)
    if not runs:
        raise ConfigError(f"no run output files found in {run_dir}")
    cells: dict[tuple[str, int], list[float]] = {}
    for payload in runs:
        key = (
            payload["config"]["optimizer"]["rule"],
            payload["config"]["train"]["target_index"],
        )
        cells.setdefault(key, []).append(payload["final"]["target_accuracy"])
    summary = run_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rule", "target_domain", "n_runs", "mean_target_accuracy", "stderr"])
        for rule, target in sorted(cells):
            accs = cells[(rule, target)]
            if len(accs) >= 2:
                mean, stderr = aggregate_trials(accs)
            else:
                mean, stderr = accs[0], float("nan")
            writer.writerow([rule, target, len(accs), f"{mean:.6f}", f"{stderr:.6f}"])
            print(f"{rule:8s} target {target}: {100 * mean:.2f} +/- {100 * stderr:.2f} "
                  f"({len(accs)} runs)")
    print(f"-> {summary}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sharpmin",
        description="Sharpness-aware training experiments on synthetic multi-domain data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment from a config")
    p.add_argument("config")
    p.add_argument("--output", help="run output JSON path (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run a hyperparameter grid from a sweep config")
    p.add_argument("config")
    p.add_argument("--output", help="sweep table CSV path")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("loo", help="leave-one-domain-out protocol over all targets")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=3, help="trials per target (default 3)")
    p.add_argument("--output-dir", help="directory for run files and the summary")
    p.set_defaults(func=_cmd_loo)

    p = sub.add_parser("sharpness", help="gap-vs-radius profile of a finished run")
    p.add_argument("run_output")
    p.add_argument("--radii", default="0.01,0.02,0.05,0.1", help="comma-separated radii")
    p.add_argument("--output", help="profile CSV path")
    p.set_defaults(func=_cmd_sharpness)

    p = sub.add_parser("landscape", help="sharp-vs-flat two-minima demonstration")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--output", help="write the full report as JSON")
    p.set_defaults(func=_cmd_landscape)

    p = sub.add_parser("report", help="aggregate run outputs in a directory")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, ValueError, FixtureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
