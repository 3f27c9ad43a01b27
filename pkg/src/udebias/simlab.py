"""Synthetic Gaussian-shift models and the Monte Carlo trial runner.

The low-dimensional model draws 5-dimensional Gaussian covariates with a
mean shift between samples and a shared linear response; the alternative
adds an intercept to the second sample's response.  The high-dimensional
model zero-pads the same shift and coefficient vectors.  Trials generate
three times the cross-fit size per side (after the density-ratio cutoff),
hand two thirds to the score fit, and run the test on the rest.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .covshift import TestConfig, run_test_multi
from .errors import ConfigError, UDebiasError
from .nuisance import NuisanceConfig
from .ustat import Sample, normal_cdf

__all__ = [
    "GaussianShiftModel",
    "gen_lowdim",
    "gen_highdim",
    "apply_ratio_cutoff",
    "sample_with_cutoff",
    "SimConfig",
    "TrialOutcome",
    "MethodSummary",
    "SimSummary",
    "run_trials",
    "write_summary_csv",
    "write_trials_csv",
]

RATIO_CUTOFF = (1.0 / 50.0, 50.0)


@dataclass(frozen=True)
class GaussianShiftModel:
    """Two Gaussian samples with shifted covariate mean and linear responses.

    First sample: x ~ N(0, I), y = x.beta + eps.  Second sample:
    u ~ N(shift_mu, I), v = response_shift + u.beta + eps.  The model also
    exposes its exact nuisances for oracle runs.
    """

    dim: int
    response_shift: float
    shift_mu: np.ndarray
    beta: np.ndarray

    @classmethod
    def lowdim(cls, alternative: bool = False) -> "GaussianShiftModel":
        mu = np.array([1.0, -1.0, 1.0, -1.0, 0.0])
        beta = np.ones(5)
        return cls(dim=5, response_shift=0.5 if alternative else 0.0, shift_mu=mu, beta=beta)

    @classmethod
    def highdim(cls, alternative: bool = False, dim: int = 500) -> "GaussianShiftModel":
        if dim < 5:
            raise ConfigError("high-dimensional model needs dim >= 5")
        mu = np.zeros(dim)
        mu[:5] = [1.0, -1.0, 1.0, -1.0, 0.0]
        beta = np.zeros(dim)
        beta[:5] = 1.0
        return cls(dim=dim, response_shift=0.25 if alternative else 0.0, shift_mu=mu, beta=beta)

    def sample_reference(self, n: int, rng: np.random.Generator) -> Sample:
        x = rng.standard_normal((n, self.dim))
        y = x @ self.beta + rng.standard_normal(n)
        return Sample(x=x, y=y)

    def sample_shifted(self, n: int, rng: np.random.Generator) -> Sample:
        u = self.shift_mu + rng.standard_normal((n, self.dim))
        v = self.response_shift + u @ self.beta + rng.standard_normal(n)
        return Sample(x=u, y=v)

    def density_ratio(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.exp(X @ self.shift_mu - 0.5 * float(self.shift_mu @ self.shift_mu))

    def score(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Exact conditional ratio of the reference response law over the
        shifted one; identically 1 when the responses share one law."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        resid = np.asarray(y, dtype=np.float64).ravel() - X @ self.beta
        a0 = self.response_shift
        return np.exp(-a0 * resid + 0.5 * a0 * a0)

    def comparison_mean(self, X: np.ndarray) -> np.ndarray:
        """Exact comparison mean under the model's own score (constant)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        val = normal_cdf(-self.response_shift / math.sqrt(2.0))
        return np.full(X.shape[0], val)

    @property
    def theta_true(self) -> float:
        return normal_cdf(-self.response_shift / math.sqrt(2.0))


def gen_lowdim(n_points_x: int, n_points_u: int, alternative: bool, seed) -> tuple:
    """Draw the two low-dimensional samples (reference first, shifted second)."""
    if n_points_x <= 0 or n_points_u <= 0:
        raise ConfigError("sample sizes must be positive")
    return gen_highdim(n_points_x, n_points_u, alternative, dim=5, seed=seed,
                       _shift=0.5 if alternative else 0.0)


def gen_highdim(n_points_x: int, n_points_u: int, alternative: bool, dim: int = 500,
                seed=0, _shift: float | None = None) -> tuple:
    """Zero-padded variant; dim=5 reproduces gen_lowdim draws exactly."""
    if n_points_x <= 0 or n_points_u <= 0:
        raise ConfigError("sample sizes must be positive")
    model = GaussianShiftModel.highdim(alternative, dim=dim)
    if _shift is not None:
        model = GaussianShiftModel(dim=dim, response_shift=_shift,
                                   shift_mu=model.shift_mu, beta=model.beta)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xs = model.sample_reference(n_points_x, rng)
    us = model.sample_shifted(n_points_u, rng)
    return xs, us


def apply_ratio_cutoff(sample: Sample, true_ratio_fn: Callable,
                       interval: tuple = RATIO_CUTOFF) -> Sample:
    """Keep exactly the points whose true marginal ratio lies in the closed interval."""
    lo, hi = interval
    r = np.asarray(true_ratio_fn(sample.x), dtype=np.float64)
    keep = (r >= lo) & (r <= hi)
    return sample.subset(np.flatnonzero(keep))


def sample_with_cutoff(model: GaussianShiftModel, n_keep: int, rng: np.random.Generator,
                       shifted: bool, interval: tuple = RATIO_CUTOFF) -> Sample:
    """Rejection-sample until n_keep points survive the ratio cutoff."""
    draw = model.sample_shifted if shifted else model.sample_reference
    parts = []
    kept = 0
    while kept < n_keep:
        chunk = draw(max(64, int(1.3 * (n_keep - kept)) + 1), rng)
        chunk = apply_ratio_cutoff(chunk, model.density_ratio, interval)
        if len(chunk):
            parts.append(chunk)
            kept += len(chunk)
    x = np.vstack([p.x for p in parts])[:n_keep]
    y = np.concatenate([p.y for p in parts])[:n_keep]
    return Sample(x=x, y=y)


# ---------------------------------------------------------------------------
# Trial runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """One simulation study: setting, sizes, solvers, seeds."""

    setting: str = "lowdim"            # "lowdim" or "highdim"
    n_crossfit: int = 500              # per-side cross-fit size
    alternative: bool = False
    trials: int = 500
    seed: int = 0
    method: str = "debiased"           # "debiased", "plugin" or "both"
    dim_override: int | None = None    # highdim only
    n_x_folds: int = 2
    n_u_folds: int = 2
    score_fraction: float = 2.0 / 3.0
    alpha_level: float = 0.05
    clip: tuple = (0.02, 50.0)
    cutoff_interval: tuple = RATIO_CUTOFF
    oracle_nuisances: bool = False
    classifier: str | None = None      # None: setting default
    regressor: str | None = None
    score_classifier: str | None = None
    n_lambdas: int | None = None
    lambda_min_ratio: float | None = None
    cv_folds: int | None = None
    stability_subsamples: int | None = None
    stability_n_lambdas: int | None = None

    def __post_init__(self):
        if self.setting not in ("lowdim", "highdim"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.method not in ("debiased", "plugin", "both"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.n_crossfit < 1:
            raise ConfigError("n_crossfit must be >= 1")
        if self.setting == "lowdim" and self.dim_override not in (None, 5):
            raise ConfigError("the low-dimensional setting is fixed at 5 dimensions")
        if self.setting == "highdim" and (self.dim_override or 500) < 5:
            raise ConfigError("dim must be >= 5")

    @property
    def dim(self) -> int:
        return 5 if self.setting == "lowdim" else (self.dim_override or 500)

    def model(self) -> GaussianShiftModel:
        if self.setting == "lowdim":
            return GaussianShiftModel.lowdim(self.alternative)
        return GaussianShiftModel.highdim(self.alternative, dim=self.dim)

    def nuisance_config(self) -> NuisanceConfig:
        lowdim = self.setting == "lowdim"
        base = NuisanceConfig(
            classifier=self.classifier or ("logistic" if lowdim else "lasso-logistic"),
            regressor=self.regressor or ("ols" if lowdim else "lasso"),
            score_classifier=self.score_classifier
            or ("logistic" if lowdim else "stability+logistic"),
            clip=self.clip,
        )
        updates = {}
        for name in ("n_lambdas", "lambda_min_ratio", "cv_folds",
                     "stability_subsamples", "stability_n_lambdas"):
            value = getattr(self, name)
            if value is not None:
                updates[name] = value
        if updates:
            from dataclasses import replace
            base = replace(base, **updates)
        return base

    def to_dict(self) -> dict:
        d = {
            "setting": self.setting,
            "n_crossfit": self.n_crossfit,
            "alternative": self.alternative,
            "trials": self.trials,
            "seed": self.seed,
            "method": self.method,
            "dim": self.dim,
            "n_x_folds": self.n_x_folds,
            "n_u_folds": self.n_u_folds,
            "score_fraction": self.score_fraction,
            "alpha_level": self.alpha_level,
            "clip": list(self.clip),
            "cutoff_interval": list(self.cutoff_interval),
            "oracle_nuisances": self.oracle_nuisances,
            "classifier": self.classifier,
            "regressor": self.regressor,
            "score_classifier": self.score_classifier,
            "n_lambdas": self.n_lambdas,
            "lambda_min_ratio": self.lambda_min_ratio,
            "cv_folds": self.cv_folds,
            "stability_subsamples": self.stability_subsamples,
            "stability_n_lambdas": self.stability_n_lambdas,
        }
        return d


@dataclass(frozen=True)
class TrialOutcome:
    theta_hat: float
    t_stat: float
    p_value: float
    reject: bool
    seed: int


@dataclass(frozen=True)
class MethodSummary:
    method: str
    mean_bias: float          # mean(theta_hat) - 0.5, per the reporting convention
    rejection_rate: float
    outcomes: tuple


@dataclass(frozen=True)
class SimSummary:
    config: SimConfig
    methods: dict
    failures: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "methods": {
                name: {
                    "mean_bias": ms.mean_bias,
                    "rejection_rate": ms.rejection_rate,
                    "n_trials": len(ms.outcomes),
                }
                for name, ms in self.methods.items()
            },
            "failures": len(self.failures),
        }


def _run_one_trial(config: SimConfig, model: GaussianShiftModel, methods: tuple,
                   child: np.random.SeedSequence):
    gen_seed, test_seed = child.spawn(2)
    rng = np.random.default_rng(gen_seed)
    n = config.n_crossfit

    if config.oracle_nuisances:
        xs = sample_with_cutoff(model, n, rng, shifted=False, interval=config.cutoff_interval)
        us = sample_with_cutoff(model, n, rng, shifted=True, interval=config.cutoff_interval)
        score_fraction = 0.0
        ncfg = NuisanceConfig(clip=config.clip, oracle=model)
    else:
        xs = sample_with_cutoff(model, 3 * n, rng, shifted=False, interval=config.cutoff_interval)
        us = sample_with_cutoff(model, 3 * n, rng, shifted=True, interval=config.cutoff_interval)
        score_fraction = config.score_fraction
        ncfg = config.nuisance_config()

    seed_int = int(test_seed.generate_state(1)[0])
    tcfg = TestConfig(
        seed=seed_int,
        n_x_folds=config.n_x_folds,
        n_u_folds=config.n_u_folds,
        score_fraction=score_fraction,
        alpha_level=config.alpha_level,
        nuisance=ncfg,
    )
    reports = run_test_multi(xs, us, tcfg, methods=methods)
    return {
        mth: TrialOutcome(
            theta_hat=rep.theta_hat,
            t_stat=rep.t_stat,
            p_value=rep.p_value,
            reject=rep.reject,
            seed=seed_int,
        )
        for mth, rep in reports.items()
    }


def run_trials(config: SimConfig, threads: int | None = None) -> SimSummary:
    """Run the configured Monte Carlo study.

    Trials are independent, use per-trial seed substreams derived from the
    master seed, and are reduced in trial order, so the summary does not
    depend on the thread count.  Trial-level failures are recorded rather
    than fatal.
    """
    model = config.model()
    methods = ("debiased", "plugin") if config.method == "both" else (config.method,)
    children = np.random.SeedSequence(config.seed).spawn(config.trials)

    def job(child):
        try:
            return _run_one_trial(config, model, methods, child)
        except UDebiasError as exc:
            return exc

    if threads is not None and threads <= 1:
        results = [job(c) for c in children]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, children))

    per_method = {mth: [] for mth in methods}
    failures = []
    for t, res in enumerate(results):
        if isinstance(res, Exception):
            failures.append((t, str(res)))
            continue
        for mth in methods:
            per_method[mth].append(res[mth])

    summaries = {}
    for mth in methods:
        outs = per_method[mth]
        thetas = np.array([o.theta_hat for o in outs])
        rejects = np.array([o.reject for o in outs])
        summaries[mth] = MethodSummary(
            method=mth,
            mean_bias=float(thetas.mean() - 0.5) if len(outs) else float("nan"),
            rejection_rate=float(rejects.mean()) if len(outs) else float("nan"),
            outcomes=tuple(outs),
        )
    return SimSummary(config=config, methods=summaries, failures=tuple(failures))


def write_summary_csv(summary: SimSummary, path) -> None:
    """One row per method, columns mirroring the simulation tables."""
    alt = summary.config.alternative
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "method", "bias", "type1", "power", "trials", "failures"])
        for name, ms in summary.methods.items():
            writer.writerow([
                summary.config.n_crossfit,
                name,
                f"{ms.mean_bias:.6f}",
                "" if alt else f"{ms.rejection_rate:.6f}",
                f"{ms.rejection_rate:.6f}" if alt else "",
                len(ms.outcomes),
                len(summary.failures),
            ])


def write_trials_csv(summary: SimSummary, path) -> None:
    """Per-trial estimates, for external plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "method", "theta_hat", "t_stat", "p_value", "reject"])
        for name, ms in summary.methods.items():
            for t, out in enumerate(ms.outcomes):
                writer.writerow([
                    t, name,
                    f"{out.theta_hat:.12g}", f"{out.t_stat:.12g}",
                    f"{out.p_value:.12g}", int(out.reject),
                ])
