"""Two-sample U-statistics with cross-fitting.

The estimand is a mean of a pair kernel over all cross-sample pairs.  Fold
grids partition each sample's index set; per-fold estimates are computed
with nuisances trained on the fold's complement and then aggregated with
size-proportional weights.  The variance estimator works from the full
matrix of per-pair kernel values (each pair evaluated once, by its owning
fold) and feeds a one-sided normal test.

Scalar reductions use math.fsum in a fixed index order so results do not
depend on evaluation blocking or thread count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .errors import (
    ConfigError,
    CoverageError,
    DegenerateVarianceError,
    FoldTrainingError,
    InsufficientDataError,
    InvalidFoldCountError,
)

__all__ = [
    "LabeledPoint",
    "Sample",
    "FoldGrid",
    "FoldEstimates",
    "PairKernel",
    "TestReport",
    "u_statistic",
    "make_fold_grid",
    "cross_fit",
    "cross_fit_evaluations",
    "aggregate",
    "variance_estimate",
    "z_test",
    "normal_cdf",
    "normal_quantile",
]


@dataclass(frozen=True)
class LabeledPoint:
    """One observation: covariate vector, scalar response, optional tie tag."""

    x: np.ndarray
    y: float
    zeta: float | None = None


@dataclass(frozen=True)
class Sample:
    """A sample as arrays: covariates (n, d), responses (n,), optional tags (n,)."""

    x: np.ndarray
    y: np.ndarray
    zeta: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if x.shape[0] != y.shape[0]:
            raise ConfigError("covariates and responses have different lengths")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigError("sample contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.zeta is not None:
            z = np.asarray(self.zeta, dtype=np.float64).ravel()
            if z.shape[0] != y.shape[0]:
                raise ConfigError("tie-break tags have the wrong length")
            if np.any((z < 0.0) | (z >= 1.0)):
                raise ConfigError("tie-break tags must lie in [0, 1)")
            object.__setattr__(self, "zeta", z)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def point(self, i: int) -> LabeledPoint:
        z = float(self.zeta[i]) if self.zeta is not None else None
        return LabeledPoint(x=self.x[i], y=float(self.y[i]), zeta=z)

    def subset(self, idx: np.ndarray) -> "Sample":
        idx = np.asarray(idx)
        z = self.zeta[idx] if self.zeta is not None else None
        return Sample(x=self.x[idx], y=self.y[idx], zeta=z)

    def with_tags(self, zeta: np.ndarray) -> "Sample":
        return Sample(x=self.x, y=self.y, zeta=zeta)


class PairKernel:
    """Evaluation contract for a pair kernel.

    Subclasses must implement the scalar ``__call__``; ``grid`` defaults to
    the literal double loop and may be overridden with a vectorized version
    (which must agree with the double loop bit-for-bit up to summation).
    """

    def __call__(self, p: LabeledPoint, q: LabeledPoint) -> float:
        raise NotImplementedError

    def grid(self, xs: Sample, us: Sample) -> np.ndarray:
        out = np.empty((len(xs), len(us)))
        for i in range(len(xs)):
            pi = xs.point(i)
            for j in range(len(us)):
                out[i, j] = self(pi, us.point(j))
        return out


class _CallableKernel(PairKernel):
    def __init__(self, fn: Callable[[LabeledPoint, LabeledPoint], float]):
        self._fn = fn

    def __call__(self, p: LabeledPoint, q: LabeledPoint) -> float:
        return float(self._fn(p, q))


def as_pair_kernel(kernel) -> PairKernel:
    if isinstance(kernel, PairKernel):
        return kernel
    if callable(kernel):
        return _CallableKernel(kernel)
    raise ConfigError("kernel must be a PairKernel or a callable of two points")


def _grid_mean(values: np.ndarray) -> float:
    # fixed-order compensated reduction: per-row pairwise sums, fsum across rows
    row_sums = values.sum(axis=1)
    return math.fsum(row_sums.tolist()) / values.size


def u_statistic(kernel, xs: Sample, us: Sample) -> float:
    """Mean of kernel(x_i, u_j) over all cross-sample pairs."""
    if len(xs) == 0:
        raise InsufficientDataError("xs sample is empty")
    if len(us) == 0:
        raise InsufficientDataError("us sample is empty")
    values = as_pair_kernel(kernel).grid(xs, us)
    return _grid_mean(values)


# ---------------------------------------------------------------------------
# Fold machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldGrid:
    """Partitions of both index sets, defining fold rectangles."""

    x_folds: tuple
    u_folds: tuple
    m: int
    n: int

    def __post_init__(self):
        for folds, total, side in ((self.x_folds, self.m, "x"), (self.u_folds, self.n, "u")):
            if len(folds) < 1:
                raise InvalidFoldCountError(f"no folds on the {side} side")
            seen = np.concatenate([np.asarray(f) for f in folds])
            if any(len(f) == 0 for f in folds):
                raise InvalidFoldCountError(f"empty fold on the {side} side")
            if seen.size != total or not np.array_equal(np.sort(seen), np.arange(total)):
                raise ConfigError(f"{side} folds are not a partition of range({total})")

    @property
    def n_x_folds(self) -> int:
        return len(self.x_folds)

    @property
    def n_u_folds(self) -> int:
        return len(self.u_folds)

    @property
    def x_sizes(self) -> np.ndarray:
        return np.array([len(f) for f in self.x_folds], dtype=np.int64)

    @property
    def u_sizes(self) -> np.ndarray:
        return np.array([len(f) for f in self.u_folds], dtype=np.int64)

    def weights(self) -> np.ndarray:
        """Fold weights M_s*N_t/(m*n); numerators stay integral before division."""
        prod = self.x_sizes[:, None] * self.u_sizes[None, :]
        assert int(prod.sum()) == self.m * self.n
        return prod / float(self.m * self.n)


def make_fold_grid(m: int, n: int, n_x_folds: int, n_u_folds: int, seed) -> FoldGrid:
    """Uniformly random balanced partitions (fold sizes differ by at most 1)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not 1 <= n_x_folds <= m:
        raise InvalidFoldCountError(f"x fold count {n_x_folds} invalid for m={m}")
    if not 1 <= n_u_folds <= n:
        raise InvalidFoldCountError(f"u fold count {n_u_folds} invalid for n={n}")
    x_folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(m), n_x_folds))
    u_folds = tuple(np.sort(f) for f in np.array_split(rng.permutation(n), n_u_folds))
    return FoldGrid(x_folds=x_folds, u_folds=u_folds, m=m, n=n)


@dataclass(frozen=True)
class FoldEstimates:
    """Per-fold estimates and their aggregation weights."""

    values: np.ndarray   # (S, T)
    weights: np.ndarray  # (S, T), positive, sums to 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if values.shape != weights.shape:
            raise ConfigError("fold values and weights have different shapes")
        if np.any(weights <= 0.0):
            raise ConfigError("fold weights must be positive")
        if abs(math.fsum(weights.ravel().tolist()) - 1.0) > 1e-12:
            raise ConfigError("fold weights must sum to 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)


def aggregate(folds: FoldEstimates) -> float:
    """Weighted combination of per-fold estimates."""
    terms = (folds.values * folds.weights).ravel().tolist()
    return math.fsum(terms)


@dataclass(frozen=True)
class CrossFitEvaluations:
    """Full per-pair kernel values plus the per-fold averages derived from them."""

    kernel_values: np.ndarray  # (m, n); pair (i, j) evaluated by its owning fold
    fold_estimates: FoldEstimates
    folds: FoldGrid


def _check_trainable(folds: FoldGrid):
    if folds.n_x_folds == 1 and folds.n_u_folds == 1:
        raise InsufficientDataError(
            "single fold on both sides leaves no out-of-fold training data"
        )


def cross_fit_evaluations(
    xs: Sample,
    us: Sample,
    folds: FoldGrid,
    trainer,
    kernel_builder,
) -> CrossFitEvaluations:
    """Train per fold on the complement, evaluate the kernel on the rectangle.

    `trainer(train_xs, train_us)` receives only points outside the fold
    rectangle (fold isolation is enforced by construction).  Rectangles are
    processed in fixed (s, t) order.
    """
    if len(xs) != folds.m or len(us) != folds.n:
        raise ConfigError("fold grid does not match the sample sizes")
    _check_trainable(folds)
    m, n = folds.m, folds.n
    values = np.full((m, n), np.nan)
    est = np.empty((folds.n_x_folds, folds.n_u_folds))
    for s, cs in enumerate(folds.x_folds):
        keep_x = np.setdiff1d(np.arange(m), cs)
        for t, dt in enumerate(folds.u_folds):
            keep_u = np.setdiff1d(np.arange(n), dt)
            try:
                bundle = trainer(xs.subset(keep_x), us.subset(keep_u))
                kernel = as_pair_kernel(kernel_builder(bundle))
                block = kernel.grid(xs.subset(cs), us.subset(dt))
            except Exception as exc:  # noqa: BLE001 - re-raised with fold coordinates
                raise FoldTrainingError(s, t, exc) from exc
            values[np.ix_(cs, dt)] = block
            est[s, t] = _grid_mean(block)
    fe = FoldEstimates(values=est, weights=folds.weights())
    return CrossFitEvaluations(kernel_values=values, fold_estimates=fe, folds=folds)


def cross_fit(xs: Sample, us: Sample, folds: FoldGrid, trainer, kernel_builder) -> FoldEstimates:
    """Cross-fitted per-fold estimates (see cross_fit_evaluations)."""
    return cross_fit_evaluations(xs, us, folds, trainer, kernel_builder).fold_estimates


# ---------------------------------------------------------------------------
# Variance and the standardized test
# ---------------------------------------------------------------------------

def variance_estimate(
    kernel_values: np.ndarray,
    center: float = 0.5,
    m: int | None = None,
    n: int | None = None,
) -> float:
    """Projection-based variance from the full matrix of kernel values.

    Row means (over all second-sample points) and column means are centered
    at `center` and their mean squares are weighted by the inverse sample
    fractions.  Missing evaluations (NaN) raise CoverageError.
    """
    values = np.asarray(kernel_values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError("kernel values must be an (m, n) matrix")
    if m is not None and values.shape[0] != m:
        raise ConfigError("m does not match the kernel value matrix")
    if n is not None and values.shape[1] != n:
        raise ConfigError("n does not match the kernel value matrix")
    n_missing = int(np.isnan(values).sum())
    if n_missing:
        raise CoverageError(n_missing)
    m_, n_ = values.shape
    lam = m_ / (m_ + n_)
    row_means = values.sum(axis=1) / n_
    col_means = values.sum(axis=0) / m_
    sq1 = ((row_means - center) ** 2).tolist()
    sq2 = ((col_means - center) ** 2).tolist()
    v1 = math.fsum(sq1) / m_
    v2 = math.fsum(sq2) / n_
    return v1 / lam + v2 / (1.0 - lam)


def normal_cdf(z: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-float(z) / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Standard normal quantile; p must lie strictly inside (0, 1).

    Round-trips with normal_cdf to ~1e-7 for |z| <= 6; beyond that the
    value of the upper-tail CDF is no longer resolvable in float64.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ConfigError(f"quantile input must be in (0, 1), got {p}")
    return float(ndtri(p))


@dataclass(frozen=True)
class TestReport:
    """Result of the standardized one-sided test (alternative: estimand < 1/2)."""

    __test__ = False  # keep pytest from collecting this dataclass

    theta_hat: float
    sigma2_hat: float
    lambda_hat: float
    t_stat: float
    p_value: float
    reject: bool
    alpha_level: float
    m: int
    n: int
    fold_estimates: FoldEstimates | None = None
    seed: int | None = field(default=None)

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.sigma2_hat / (self.m + self.n))

    def to_dict(self) -> dict:
        fe = None
        if self.fold_estimates is not None:
            fe = [[float(v) for v in row] for row in self.fold_estimates.values]
        return {
            "theta_hat": float(self.theta_hat),
            "sigma2_hat": float(self.sigma2_hat),
            "lambda": float(self.lambda_hat),
            "t_stat": float(self.t_stat),
            "p_value": float(self.p_value),
            "reject": bool(self.reject),
            "alpha_level": float(self.alpha_level),
            "m": int(self.m),
            "n": int(self.n),
            "fold_estimates": fe,
            "seed": self.seed,
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        kwargs.setdefault("indent", 2)
        return json.dumps(self.to_dict(), **kwargs)


def z_test(
    theta_hat: float,
    sigma2_hat: float,
    m: int,
    n: int,
    alpha_level: float = 0.05,
    fold_estimates: FoldEstimates | None = None,
    seed: int | None = None,
) -> TestReport:
    """One-sided normal test of the null value 1/2 against smaller values."""
    if not 0.0 < alpha_level < 1.0:
        raise ConfigError("alpha_level must be in (0, 1)")
    if sigma2_hat <= 0.0:
        raise DegenerateVarianceError(
            "variance estimate is not positive; the kernel is degenerate "
            "(random tie-breaking avoids this for rank kernels)"
        )
    t = (0.5 - theta_hat) * math.sqrt(m + n) / math.sqrt(sigma2_hat)
    p = 1.0 - normal_cdf(t)
    reject = t > normal_quantile(1.0 - alpha_level)
    return TestReport(
        theta_hat=float(theta_hat),
        sigma2_hat=float(sigma2_hat),
        lambda_hat=m / (m + n),
        t_stat=float(t),
        p_value=float(p),
        reject=bool(reject),
        alpha_level=float(alpha_level),
        m=int(m),
        n=int(n),
        fold_estimates=fold_estimates,
        seed=seed,
    )
