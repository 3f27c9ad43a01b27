"""Two-sample conditional-distribution (covariate-shift) test.

The comparison indicator ranks a pair of observations by a fixed score with
per-point uniform tie-breaking.  The plug-in kernel weights it by the
marginal covariate density ratio; the debiased kernel adds the correction
alpha(U) - gamma(X) * alpha(X), which removes the first-order effect of
density-ratio estimation error.  `run_test` wires the full pipeline: score
split, tie tags, fold grid, per-fold nuisance fits, aggregation, variance
and the one-sided normal test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    FoldTrainingError,
    InsufficientDataError,
    ScoreError,
)
from .nuisance import NuisanceBundle, NuisanceConfig, fit_density_ratio, fit_score_s, make_classifier, train_bundle
from .ustat import (
    FoldEstimates,
    LabeledPoint,
    PairKernel,
    Sample,
    TestReport,
    aggregate,
    make_fold_grid,
    variance_estimate,
    z_test,
)

__all__ = [
    "TieBreakTags",
    "draw_tags",
    "comparison_a",
    "comparison_matrix",
    "plugin_kernel",
    "debiased_kernel",
    "influence_mean_zero_check",
    "TestConfig",
    "run_test",
    "run_test_multi",
    "double_robustness_probe",
    "DoubleRobustnessProbe",
]


@dataclass(frozen=True)
class TieBreakTags:
    """One uniform draw per point, fixed for the lifetime of a test run."""

    zeta_x: np.ndarray
    zeta_u: np.ndarray

    def __post_init__(self):
        for name in ("zeta_x", "zeta_u"):
            z = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if np.any((z < 0.0) | (z >= 1.0)):
                raise ConfigError("tie-break uniforms must lie in [0, 1)")
            object.__setattr__(self, name, z)


def draw_tags(m: int, n: int, rng: np.random.Generator) -> TieBreakTags:
    """Draw the per-point tie-break uniforms before any score is computed."""
    return TieBreakTags(zeta_x=rng.random(m), zeta_u=rng.random(n))


def _score_scalar(s_hat, point: LabeledPoint) -> float:
    val = float(np.asarray(s_hat(point.x[None, :], np.array([point.y])))[0])
    if not math.isfinite(val):
        raise ScoreError(f"score is not finite at point with response {point.y}")
    return val


def comparison_a(p: LabeledPoint, q: LabeledPoint, s_hat, zeta_p: float, zeta_q: float) -> float:
    """Comparison indicator with uniform tie-breaking.

    Returns 1 when the first point scores strictly below the second, or the
    scores are exactly equal (floating-point equality) and the first point's
    tag is below the second's; otherwise 0.
    """
    sp = _score_scalar(s_hat, p)
    sq = _score_scalar(s_hat, q)
    if sp < sq:
        return 1.0
    if sp == sq and zeta_p < zeta_q:
        return 1.0
    return 0.0


def _sample_scores(s_hat, sample: Sample) -> np.ndarray:
    vals = np.asarray(s_hat(sample.x, sample.y), dtype=np.float64).ravel()
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise ScoreError(f"score is not finite at sample index {bad}")
    return vals


def _require_tags(sample: Sample, side: str) -> np.ndarray:
    if sample.zeta is None:
        raise ConfigError(f"{side} sample carries no tie-break tags")
    return sample.zeta


def comparison_matrix(s_hat, xs: Sample, us: Sample) -> np.ndarray:
    """All pairwise comparison indicators between two tagged samples."""
    sp = _sample_scores(s_hat, xs)
    sq = _sample_scores(s_hat, us)
    zx = _require_tags(xs, "first")
    zu = _require_tags(us, "second")
    less = sp[:, None] < sq[None, :]
    ties = (sp[:, None] == sq[None, :]) & (zx[:, None] < zu[None, :])
    return (less | ties).astype(np.float64)


class PluginKernel(PairKernel):
    """gamma(x) times the comparison indicator; always nonnegative."""

    def __init__(self, bundle: NuisanceBundle, tags: TieBreakTags | None = None):
        self.bundle = bundle
        self.tags = tags

    def _with_tags(self, sample: Sample, tag_array: np.ndarray | None) -> Sample:
        if sample.zeta is not None:
            return sample
        if tag_array is not None and len(sample) == tag_array.shape[0]:
            return sample.with_tags(tag_array)
        return sample  # comparison_matrix will raise a clear error

    def __call__(self, p: LabeledPoint, q: LabeledPoint) -> float:
        if p.zeta is None or q.zeta is None:
            raise ConfigError("points must carry tie-break tags")
        g = float(np.asarray(self.bundle.gamma(p.x[None, :]))[0])
        return g * comparison_a(p, q, self.bundle.score, p.zeta, q.zeta)

    def grid(self, xs: Sample, us: Sample) -> np.ndarray:
        xs = self._with_tags(xs, self.tags.zeta_x if self.tags else None)
        us = self._with_tags(us, self.tags.zeta_u if self.tags else None)
        a = comparison_matrix(self.bundle.score, xs, us)
        g = np.asarray(self.bundle.gamma(xs.x), dtype=np.float64)
        return g[:, None] * a


class DebiasedKernel(PluginKernel):
    """Plug-in kernel plus the influence correction alpha(u) - gamma(x)alpha(x)."""

    def __init__(self, bundle: NuisanceBundle, tags: TieBreakTags | None = None):
        if bundle.alpha is None:
            raise ConfigError("bundle has no fitted comparison-mean regression")
        super().__init__(bundle, tags)

    def __call__(self, p: LabeledPoint, q: LabeledPoint) -> float:
        base = super().__call__(p, q)
        g = float(np.asarray(self.bundle.gamma(p.x[None, :]))[0])
        a_u = float(np.asarray(self.bundle.alpha(q.x[None, :]))[0])
        a_x = float(np.asarray(self.bundle.alpha(p.x[None, :]))[0])
        return base + a_u - g * a_x

    def grid(self, xs: Sample, us: Sample) -> np.ndarray:
        xs = self._with_tags(xs, self.tags.zeta_x if self.tags else None)
        us = self._with_tags(us, self.tags.zeta_u if self.tags else None)
        a = comparison_matrix(self.bundle.score, xs, us)
        g = np.asarray(self.bundle.gamma(xs.x), dtype=np.float64)
        alpha_u = np.asarray(self.bundle.alpha(us.x), dtype=np.float64)
        alpha_x = np.asarray(self.bundle.alpha(xs.x), dtype=np.float64)
        return g[:, None] * a + alpha_u[None, :] - (g * alpha_x)[:, None]


def plugin_kernel(bundle: NuisanceBundle, tags: TieBreakTags | None = None) -> PluginKernel:
    return PluginKernel(bundle, tags)


def debiased_kernel(bundle: NuisanceBundle, tags: TieBreakTags | None = None) -> DebiasedKernel:
    return DebiasedKernel(bundle, tags)


def influence_mean_zero_check(bundle: NuisanceBundle, xs: Sample, us: Sample) -> float:
    """Pairwise mean of the correction term alpha(U) - gamma(X)alpha(X).

    With the true nuisances of a synthetic model this is a mean-zero
    quantity; the test harness compares it against its standard error.
    """
    if bundle.alpha is None:
        raise ConfigError("bundle has no comparison-mean function")
    alpha_u = np.asarray(bundle.alpha(us.x), dtype=np.float64)
    g = np.asarray(bundle.gamma(xs.x), dtype=np.float64)
    alpha_x = np.asarray(bundle.alpha(xs.x), dtype=np.float64)
    return float(
        math.fsum(alpha_u.tolist()) / len(us)
        - math.fsum((g * alpha_x).tolist()) / len(xs)
    )


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestConfig:
    """Options for run_test; everything random flows from `seed`."""

    __test__ = False  # keep pytest from collecting this dataclass

    seed: int = 0
    n_x_folds: int = 2
    n_u_folds: int = 2
    score_fraction: float = 2.0 / 3.0
    alpha_level: float = 0.05
    method: str = "debiased"  # "debiased" or "plugin"
    center_at_estimate: bool = False  # center the variance at theta_hat instead of 1/2
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "n_x_folds": int(self.n_x_folds),
            "n_u_folds": int(self.n_u_folds),
            "score_fraction": float(self.score_fraction),
            "alpha_level": float(self.alpha_level),
            "method": self.method,
            "center_at_estimate": bool(self.center_at_estimate),
            "nuisance": self.nuisance.to_dict(),
        }


def _split_counts(total: int, fraction: float) -> int:
    return int(math.floor(fraction * total + 1e-9))


def _fold_estimates_from_matrix(values: np.ndarray, folds) -> FoldEstimates:
    est = np.empty((folds.n_x_folds, folds.n_u_folds))
    for s, cs in enumerate(folds.x_folds):
        for t, dt in enumerate(folds.u_folds):
            block = values[np.ix_(cs, dt)]
            est[s, t] = math.fsum(block.sum(axis=1).tolist()) / block.size
    return FoldEstimates(values=est, weights=folds.weights())


def run_test_multi(
    xs_full: Sample,
    us_full: Sample,
    config: TestConfig,
    methods: tuple = ("debiased",),
) -> dict:
    """Run the pipeline once and report for each requested kernel.

    Both kernels share the score split, tags, folds and per-fold nuisance
    fits, so "debiased" and "plugin" reports from one call are computed on
    exactly the same randomness.
    """
    for mth in methods:
        if mth not in ("debiased", "plugin"):
            raise ConfigError(f"unknown method {mth!r}")
    if not 0.0 <= config.score_fraction < 1.0:
        raise ConfigError("score_fraction must lie in [0, 1)")

    root = np.random.SeedSequence(config.seed)
    k_split, k_tags, k_folds, k_fits = root.spawn(4)

    oracle_mode = config.nuisance.oracle is not None
    prefit_score = config.nuisance.score_predictor is not None
    if config.score_fraction == 0.0 and not (oracle_mode or prefit_score):
        raise ConfigError("score_fraction 0 requires a pre-fitted score or an oracle")

    rng_split = np.random.default_rng(k_split)
    n_sx = _split_counts(len(xs_full), config.score_fraction)
    n_su = _split_counts(len(us_full), config.score_fraction)
    perm_x = rng_split.permutation(len(xs_full))
    perm_u = rng_split.permutation(len(us_full))
    score_x, cf_x = xs_full.subset(perm_x[:n_sx]), xs_full.subset(perm_x[n_sx:])
    score_u, cf_u = us_full.subset(perm_u[:n_su]), us_full.subset(perm_u[n_su:])

    m_cf, n_cf = len(cf_x), len(cf_u)
    min_pts = max(2 * config.n_x_folds, 2 * config.n_u_folds, 20)
    if m_cf < min_pts or n_cf < min_pts:
        raise InsufficientDataError(
            f"need at least {min_pts} cross-fit points per sample, "
            f"got {m_cf} and {n_cf}"
        )

    # tags are drawn before any score is computed and never redrawn
    tags = draw_tags(m_cf, n_cf, np.random.default_rng(k_tags))
    cf_x = cf_x.with_tags(tags.zeta_x)
    cf_u = cf_u.with_tags(tags.zeta_u)

    ncfg = config.nuisance
    if not oracle_mode and not prefit_score:
        # both halves of the score use the same classifier family so their
        # estimation errors cancel when the response is uninformative
        score_name = ncfg.score_classifier or ncfg.classifier
        seed_joint = int(k_fits.generate_state(2)[0])
        clf_marginal = make_classifier(score_name, ncfg, seed=seed_joint + 1)
        marginal = fit_density_ratio(score_x.x, score_u.x, clf_marginal, ncfg.clip)
        clf_joint = make_classifier(score_name, ncfg, seed=seed_joint)
        score = fit_score_s(score_x, score_u, clf_joint, marginal, ncfg.clip)
        ncfg = replace(ncfg, score_predictor=score)

    folds = make_fold_grid(
        m_cf, n_cf, config.n_x_folds, config.n_u_folds, np.random.default_rng(k_folds)
    )
    if folds.n_x_folds == 1 and folds.n_u_folds == 1:
        raise InsufficientDataError(
            "single fold on both sides leaves no out-of-fold training data"
        )

    need_alpha = "debiased" in methods
    fold_seeds = [int(s.generate_state(1)[0]) for s in k_fits.spawn(folds.n_x_folds * folds.n_u_folds)]

    matrices = {mth: np.full((m_cf, n_cf), np.nan) for mth in methods}
    k = 0
    for s, cs in enumerate(folds.x_folds):
        keep_x = np.setdiff1d(np.arange(m_cf), cs)
        for t, dt in enumerate(folds.u_folds):
            keep_u = np.setdiff1d(np.arange(n_cf), dt)
            try:
                bundle = train_bundle(
                    cf_x.subset(keep_x),
                    cf_u.subset(keep_u),
                    ncfg,
                    seed=fold_seeds[k],
                    need_alpha=need_alpha,
                )
                block_x, block_u = cf_x.subset(cs), cf_u.subset(dt)
                if "plugin" in methods or "debiased" in methods:
                    a = comparison_matrix(bundle.score, block_x, block_u)
                    g = np.asarray(bundle.gamma(block_x.x), dtype=np.float64)
                    plug = g[:, None] * a
                    if "plugin" in methods:
                        matrices["plugin"][np.ix_(cs, dt)] = plug
                    if "debiased" in methods:
                        alpha_u = np.asarray(bundle.alpha(block_u.x), dtype=np.float64)
                        alpha_x = np.asarray(bundle.alpha(block_x.x), dtype=np.float64)
                        matrices["debiased"][np.ix_(cs, dt)] = (
                            plug + alpha_u[None, :] - (g * alpha_x)[:, None]
                        )
            except Exception as exc:  # noqa: BLE001
                raise FoldTrainingError(s, t, exc) from exc
            k += 1

    reports = {}
    for mth in methods:
        values = matrices[mth]
        fe = _fold_estimates_from_matrix(values, folds)
        theta = aggregate(fe)
        center = theta if config.center_at_estimate else 0.5
        sigma2 = variance_estimate(values, center=center)
        reports[mth] = z_test(
            theta, sigma2, m_cf, n_cf,
            alpha_level=config.alpha_level,
            fold_estimates=fe,
            seed=config.seed,
        )
    return reports


def run_test(xs_full: Sample, us_full: Sample, config: TestConfig) -> TestReport:
    """Full pipeline for one kernel; deterministic given (data, seed)."""
    return run_test_multi(xs_full, us_full, config, methods=(config.method,))[config.method]


# ---------------------------------------------------------------------------
# Double-robustness probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoubleRobustnessProbe:
    """Empirical biases when the true nuisances are deliberately perturbed."""

    bias_gamma_only: float
    bias_alpha_only: float
    bias_both: float
    bias_plugin_gamma_only: float
    se_gamma_only: float
    se_alpha_only: float
    se_both: float
    se_plugin_gamma_only: float
    product_mean: float        # E[(gamma_hat - gamma)(alpha - alpha_hat)] by Monte Carlo
    product_mean_se: float
    n_reps: int

    def to_dict(self) -> dict:
        return {k: float(v) if not isinstance(v, int) else v for k, v in self.__dict__.items()}


def double_robustness_probe(
    true_model,
    gamma_perturbation: Callable[[np.ndarray], np.ndarray],
    alpha_perturbation: Callable[[np.ndarray], np.ndarray],
    sizes: tuple = (500, 500),
    n_reps: int = 200,
    seed: int = 0,
    n_mc: int = 200_000,
) -> DoubleRobustnessProbe:
    """Measure the estimator's bias under known nuisance errors.

    The model supplies exact nuisances; perturbations are added one at a
    time and together, with fresh data per replication.  The direct Monte
    Carlo of the nuisance-error product gives the predicted joint bias.
    """
    m, n = sizes
    root = np.random.SeedSequence(seed)
    child_mc, *rep_seeds = root.spawn(n_reps + 1)

    gamma0 = true_model.density_ratio
    alpha0 = true_model.comparison_mean
    score = true_model.score
    theta0 = 0.5  # probe runs under the model's null configuration

    def gamma_pert(X):
        return gamma0(X) + gamma_perturbation(X)

    def alpha_pert(X):
        return np.asarray(alpha0(X), dtype=np.float64) + alpha_perturbation(X)

    settings = {
        "gamma_only": (gamma_pert, alpha0, True),
        "alpha_only": (gamma0, alpha_pert, True),
        "both": (gamma_pert, alpha_pert, True),
        "plugin_gamma_only": (gamma_pert, None, False),
    }
    draws = {name: [] for name in settings}

    for child in rep_seeds:
        rng = np.random.default_rng(child)
        xs = true_model.sample_reference(m, rng)
        us = true_model.sample_shifted(n, rng)
        tags = draw_tags(m, n, rng)
        xs = xs.with_tags(tags.zeta_x)
        us = us.with_tags(tags.zeta_u)
        a = comparison_matrix(score, xs, us)
        for name, (gfn, afn, debias) in settings.items():
            g = np.asarray(gfn(xs.x), dtype=np.float64)
            vals = g[:, None] * a
            if debias:
                au = np.asarray(afn(us.x), dtype=np.float64)
                ax = np.asarray(afn(xs.x), dtype=np.float64)
                vals = vals + au[None, :] - (g * ax)[:, None]
            draws[name].append(float(vals.mean()) - theta0)

    def mean_se(vals):
        arr = np.asarray(vals)
        return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(len(arr)))

    b_g, se_g = mean_se(draws["gamma_only"])
    b_a, se_a = mean_se(draws["alpha_only"])
    b_b, se_b = mean_se(draws["both"])
    b_p, se_p = mean_se(draws["plugin_gamma_only"])

    rng_mc = np.random.default_rng(child_mc)
    xs_mc = true_model.sample_reference(n_mc, rng_mc)
    prod = np.asarray(gamma_perturbation(xs_mc.x)) * (-np.asarray(alpha_perturbation(xs_mc.x)))
    product_mean = float(prod.mean())
    product_se = float(prod.std(ddof=1) / math.sqrt(n_mc))

    return DoubleRobustnessProbe(
        bias_gamma_only=b_g,
        bias_alpha_only=b_a,
        bias_both=b_b,
        bias_plugin_gamma_only=b_p,
        se_gamma_only=se_g,
        se_alpha_only=se_a,
        se_both=se_b,
        se_plugin_gamma_only=se_p,
        product_mean=product_mean,
        product_mean_se=product_se,
        n_reps=n_reps,
    )
