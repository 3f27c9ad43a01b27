"""Command-line interface: simulate, test, partition-test, rerun.

Every command resolves its options into a manifest (written next to the
outputs) that is sufficient to re-run it bit-identically; all randomness
flows from --seed.  Exit codes: 0 success, 1 runtime failure, 2 bad
configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .covshift import TestConfig, run_test
from .dataio import PartitionSpec, load_csv, repeated_partition_test
from .errors import ConfigError, DataError, UDebiasError
from .nuisance import NuisanceConfig
from .simlab import SimConfig, run_trials, write_summary_csv, write_trials_csv
from .ustat import Sample

_KIND_ALIASES = {
    "random": "random",
    "exp-tilt": "exp_tilt",
    "covariate": "covariate_split",
    "response": "response_split",
}


def resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("UDEBIAS_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"UDEBIAS_THREADS is not an integer: {env!r}") from exc
    return os.cpu_count() or 1


def _write_manifest(out_dir: Path, command: str, options: dict, outputs: list) -> None:
    manifest = {
        "command": command,
        "options": options,
        "version": __version__,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _add_common_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--x-folds", type=int, default=2, help="folds over the first sample")
    p.add_argument("--u-folds", type=int, default=2, help="folds over the second sample")
    p.add_argument("--score-fraction", type=float, default=2.0 / 3.0,
                   help="fraction of each sample used to fit the pair score")
    p.add_argument("--clip-lo", type=float, default=0.02)
    p.add_argument("--clip-hi", type=float, default=50.0)
    p.add_argument("--alpha-level", type=float, default=0.05)
    p.add_argument("--classifier", default=None,
                   choices=[None, "logistic", "lasso-logistic", "stability+logistic"])
    p.add_argument("--regressor", default=None, choices=[None, "ols", "ridge", "lasso"])
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: UDEBIAS_THREADS or all cores)")


def _simulate_options(args) -> dict:
    return {
        "setting": args.setting,
        "n": args.n,
        "trials": args.trials,
        "method": args.method,
        "alt": bool(args.alt),
        "seed": args.seed,
        "dim": args.dim,
        "oracle": bool(args.oracle),
        "x_folds": args.x_folds,
        "u_folds": args.u_folds,
        "score_fraction": args.score_fraction,
        "clip_lo": args.clip_lo,
        "clip_hi": args.clip_hi,
        "alpha_level": args.alpha_level,
        "classifier": args.classifier,
        "regressor": args.regressor,
        "stability_subsamples": args.stability_subsamples,
        "n_lambdas": args.n_lambdas,
        "out": str(args.out),
        "threads": args.threads,
    }


def _run_simulate(options: dict) -> int:
    config = SimConfig(
        setting=options["setting"],
        n_crossfit=options["n"],
        alternative=options["alt"],
        trials=options["trials"],
        seed=options["seed"],
        method=options["method"],
        dim_override=options["dim"],
        n_x_folds=options["x_folds"],
        n_u_folds=options["u_folds"],
        score_fraction=options["score_fraction"],
        alpha_level=options["alpha_level"],
        clip=(options["clip_lo"], options["clip_hi"]),
        oracle_nuisances=options["oracle"],
        classifier=options["classifier"],
        regressor=options["regressor"],
        stability_subsamples=options["stability_subsamples"],
        n_lambdas=options["n_lambdas"],
    )
    threads = resolve_threads(options["threads"])
    summary = run_trials(config, threads=threads)
    out = _out_dir(options["out"])
    write_summary_csv(summary, out / "summary.csv")
    write_trials_csv(summary, out / "trials.csv")
    _write_manifest(out, "simulate", options, ["summary.csv", "trials.csv"])
    for name, ms in summary.methods.items():
        kind = "power" if config.alternative else "type-1"
        print(f"{name}: bias {ms.mean_bias:+.4f}, {kind} {ms.rejection_rate:.3f} "
              f"({len(ms.outcomes)} trials, {len(summary.failures)} failures)")
    return 0


# ---------------------------------------------------------------------------
# test
# ---------------------------------------------------------------------------

def _test_options(args) -> dict:
    return {
        "sample_f": str(args.sample_f),
        "sample_g": str(args.sample_g),
        "response": args.response,
        "seed": args.seed,
        "x_folds": args.x_folds,
        "u_folds": args.u_folds,
        "score_fraction": args.score_fraction,
        "clip_lo": args.clip_lo,
        "clip_hi": args.clip_hi,
        "alpha_level": args.alpha_level,
        "classifier": args.classifier,
        "regressor": args.regressor,
        "method": args.method,
        "out": str(args.out),
        "threads": args.threads,
    }


def _run_test_cmd(options: dict) -> int:
    ds_f = load_csv(options["sample_f"], options["response"])
    ds_g = load_csv(options["sample_g"], options["response"])
    xs = Sample(x=ds_f.features, y=ds_f.response)
    us = Sample(x=ds_g.features, y=ds_g.response)
    config = TestConfig(
        seed=options["seed"],
        n_x_folds=options["x_folds"],
        n_u_folds=options["u_folds"],
        score_fraction=options["score_fraction"],
        alpha_level=options["alpha_level"],
        method=options["method"],
        nuisance=NuisanceConfig(
            classifier=options["classifier"] or "logistic",
            regressor=options["regressor"] or "ols",
            clip=(options["clip_lo"], options["clip_hi"]),
        ),
    )
    report = run_test(xs, us, config)
    out = _out_dir(options["out"])
    with open(out / "report.json", "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    _write_manifest(out, "test", options, ["report.json"])
    print(f"estimate {report.theta_hat:.4f}, statistic {report.t_stat:.3f}, "
          f"p-value {report.p_value:.4g}, reject={report.reject}")
    return 0


# ---------------------------------------------------------------------------
# partition-test
# ---------------------------------------------------------------------------

def _partition_options(args) -> dict:
    return {
        "data": str(args.data),
        "kind": args.kind,
        "column": args.column,
        "response": args.response,
        "reps": args.reps,
        "seed": args.seed,
        "flip_fraction": args.flip_fraction,
        "tilt": args.tilt,
        "raw_tilt": bool(args.raw_tilt),
        "x_folds": args.x_folds,
        "u_folds": args.u_folds,
        "score_fraction": args.score_fraction,
        "clip_lo": args.clip_lo,
        "clip_hi": args.clip_hi,
        "alpha_level": args.alpha_level,
        "classifier": args.classifier,
        "regressor": args.regressor,
        "out": str(args.out),
        "threads": args.threads,
    }


def _run_partition_test(options: dict) -> int:
    if options["reps"] < 1:
        raise ConfigError("reps must be >= 1")
    kind = _KIND_ALIASES[options["kind"]]
    if kind == "covariate_split" and not options["column"]:
        raise ConfigError("--kind covariate requires --column")
    ds = load_csv(options["data"], options["response"])
    tilt = None
    if kind == "exp_tilt":
        if options["tilt"]:
            tilt = np.asarray([float(v) for v in options["tilt"].split(",")])
        else:
            raise ConfigError("--kind exp-tilt requires --tilt v1,v2,...")
    spec = PartitionSpec(
        kind=kind,
        tilt_vector=tilt,
        split_column=options["column"],
        flip_fraction=options["flip_fraction"],
        seed=options["seed"],
        standardize_tilt=not options["raw_tilt"],
    )
    config = TestConfig(
        seed=options["seed"],
        n_x_folds=options["x_folds"],
        n_u_folds=options["u_folds"],
        score_fraction=options["score_fraction"],
        alpha_level=options["alpha_level"],
        nuisance=NuisanceConfig(
            classifier=options["classifier"] or "logistic",
            regressor=options["regressor"] or "ols",
            clip=(options["clip_lo"], options["clip_hi"]),
        ),
    )
    threads = resolve_threads(options["threads"])
    report = repeated_partition_test(ds, spec, config, repetitions=options["reps"],
                                     threads=threads)
    out = _out_dir(options["out"])
    with open(out / "report.json", "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(out / "reps.csv", "w") as fh:
        fh.write("rep,theta_hat,standard_error,p_value\n")
        for r, (th, se, p) in enumerate(zip(report.thetas, report.ses, report.pvalues)):
            fh.write(f"{r},{th:.12g},{se:.12g},{p:.12g}\n")
    _write_manifest(out, "partition-test", options, ["report.json", "reps.csv"])
    print(f"mean estimate {report.mean_theta:.4f}, median SE {report.median_se:.4f}, "
          f"aggregated p-value {report.aggregated_p:.4g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

_RUNNERS = {
    "simulate": _run_simulate,
    "test": _run_test_cmd,
    "partition-test": _run_partition_test,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="udebias",
        description="Debiased two-sample conditional-distribution testing",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    p_sim.add_argument("--setting", choices=["lowdim", "highdim"], required=True)
    p_sim.add_argument("--n", type=int, required=True, help="per-side cross-fit size")
    p_sim.add_argument("--trials", type=int, required=True)
    p_sim.add_argument("--method", choices=["debiased", "plugin", "both"], default="debiased")
    p_sim.add_argument("--alt", action="store_true", help="alternative instead of null")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--dim", type=int, default=None, help="override dimension (highdim)")
    p_sim.add_argument("--oracle", action="store_true", help="use exact synthetic nuisances")
    p_sim.add_argument("--stability-subsamples", type=int, default=None)
    p_sim.add_argument("--n-lambdas", type=int, default=None)
    p_sim.add_argument("--out", default="udebias-out")
    _add_common_solver_flags(p_sim)

    p_test = sub.add_parser("test", help="test two CSV samples")
    p_test.add_argument("--sample-f", required=True, help="first (reference) sample CSV")
    p_test.add_argument("--sample-g", required=True, help="second sample CSV")
    p_test.add_argument("--response", required=True, help="response column name")
    p_test.add_argument("--seed", type=int, default=0)
    p_test.add_argument("--method", choices=["debiased", "plugin"], default="debiased")
    p_test.add_argument("--out", default="udebias-out")
    _add_common_solver_flags(p_test)

    p_part = sub.add_parser("partition-test", help="partition one CSV and test repeatedly")
    p_part.add_argument("--data", required=True)
    p_part.add_argument("--kind", choices=list(_KIND_ALIASES), required=True)
    p_part.add_argument("--column", default=None, help="split column (covariate kind)")
    p_part.add_argument("--response", required=True)
    p_part.add_argument("--reps", type=int, default=20)
    p_part.add_argument("--seed", type=int, default=0)
    p_part.add_argument("--flip-fraction", type=float, default=0.05)
    p_part.add_argument("--tilt", default=None, help="comma-separated tilt vector")
    p_part.add_argument("--raw-tilt", action="store_true",
                        help="tilt on raw covariates instead of standardized")
    p_part.add_argument("--out", default="udebias-out")
    _add_common_solver_flags(p_part)

    p_rerun = sub.add_parser("rerun", help="re-run a command from its manifest")
    p_rerun.add_argument("--manifest", required=True)
    p_rerun.add_argument("--out", default=None, help="override the output directory")
    p_rerun.add_argument("--threads", type=int, default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        if args.command == "simulate":
            if args.trials < 1:
                raise ConfigError("trials must be >= 1")
            return _run_simulate(_simulate_options(args))
        if args.command == "test":
            return _run_test_cmd(_test_options(args))
        if args.command == "partition-test":
            return _run_partition_test(_partition_options(args))
        if args.command == "rerun":
            with open(args.manifest) as fh:
                manifest = json.load(fh)
            command = manifest["command"]
            options = dict(manifest["options"])
            if args.out is not None:
                options["out"] = args.out
            if args.threads is not None:
                options["threads"] = args.threads
            return _RUNNERS[command](options)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UDebiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
