"""Self-contained numerical solvers used for nuisance estimation.

Everything here works on plain numpy arrays: IRLS logistic regression,
coordinate-descent LASSO (linear and logistic families), OLS/ridge via QR,
and stability selection on top of the logistic LASSO path.

Penalized fits standardize features internally (the L1 penalty is applied
on standardized coordinates); reported coefficients are always mapped back
to the original feature scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError, DegenerateLabelsError, SingularityError

_PROB_FLOOR = 1e-10  # guards log/exp inside solvers; classifier-facing floor is 1e-6
_WEIGHT_FLOOR = 1e-5


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _standardize(X: np.ndarray):
    """Column means/scales; zero-variance columns get scale 1 and are flagged."""
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    degenerate = scale <= 0.0
    scale = np.where(degenerate, 1.0, scale)
    Xs = (X - mean) / scale
    return Xs, mean, scale, degenerate


@dataclass(frozen=True)
class LinearModel:
    """Fitted affine model, identity or logit link.

    Coefficients live on the original feature scale; `feature_mean` and
    `feature_scale` record the standardization used during fitting.
    """

    intercept: float
    coef: np.ndarray
    link: str  # "identity" or "logit"
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.intercept + X @ self.coef

    def predict(self, X: np.ndarray) -> np.ndarray:
        eta = self.linear_predictor(X)
        if self.link == "identity":
            return eta
        return _sigmoid(eta)

    def to_dict(self) -> dict:
        return {
            "intercept": float(self.intercept),
            "coefficients": [float(c) for c in self.coef],
            "link": self.link,
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_scale": [float(v) for v in self.feature_scale],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(
            intercept=float(d["intercept"]),
            coef=np.asarray(d["coefficients"], dtype=np.float64),
            link=str(d["link"]),
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(d["feature_scale"], dtype=np.float64),
        )


def _model_from_standardized(beta0, beta_s, link, mean, scale, diagnostics):
    coef = beta_s / scale
    intercept = beta0 - float(coef @ mean)
    return LinearModel(
        intercept=float(intercept),
        coef=coef,
        link=link,
        feature_mean=mean,
        feature_scale=scale,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Logistic regression (IRLS / Newton with step halving)
# ---------------------------------------------------------------------------

def fit_logistic_irls(
    X: np.ndarray,
    y: np.ndarray,
    ridge_eps: float = 1e-6,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LinearModel:
    """Maximize the mean log-likelihood minus (ridge_eps/2)*||slopes||^2.

    The ridge term (on standardized slopes, intercept free) guarantees a
    finite maximizer even for separable data.  Convergence is declared when
    the penalized gradient norm drops below `tol`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ConfigError("features and labels have incompatible shapes")
    if X.shape[0] < 2:
        raise ConfigError("need at least 2 rows to fit a logistic model")
    uniq = np.unique(y)
    if not np.all(np.isin(uniq, (0.0, 1.0))):
        raise ConfigError("labels must be 0/1")
    if uniq.size < 2:
        raise DegenerateLabelsError("labels contain a single class")

    n, d = X.shape
    Xs, mean, scale, _ = _standardize(X)
    A = np.column_stack([np.ones(n), Xs])
    beta = np.zeros(d + 1)

    def objective(b):
        eta = A @ b
        # mean log-likelihood, numerically safe
        ll = y * eta - np.logaddexp(0.0, eta)
        return float(ll.mean() - 0.5 * ridge_eps * float(b[1:] @ b[1:]))

    def gradient(b):
        p = _sigmoid(A @ b)
        g = A.T @ (y - p) / n
        g[1:] -= ridge_eps * b[1:]
        return g, p

    obj = objective(beta)
    grad, p = gradient(beta)
    trace = [obj]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        w = np.maximum(p * (1.0 - p), _WEIGHT_FLOOR)
        H = (A * w[:, None]).T @ A / n
        H[1:, 1:] += ridge_eps * np.eye(d)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # step halving keeps the objective nondecreasing
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-14:
                break
            t *= 0.5
        beta = beta + t * step
        obj = max(obj, cand_obj)
        trace.append(obj)
        grad, p = gradient(beta)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            diagnostics = {
                "grad_norm": gnorm,
                "n_iter": n_iter,
                "objective": obj,
                "objective_trace": trace,
            }
            return _model_from_standardized(beta[0], beta[1:], "logit", mean, scale, diagnostics)
    raise ConvergenceError(
        f"IRLS did not reach gradient norm {tol} in {max_iter} iterations "
        f"(final norm {float(np.linalg.norm(grad)):.3e})",
        residual=float(np.linalg.norm(grad)),
    )


# ---------------------------------------------------------------------------
# OLS / ridge via orthogonal decomposition
# ---------------------------------------------------------------------------

def fit_ols(X: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> LinearModel:
    """Least squares with optional ridge on the slopes (intercept free).

    Plain OLS solves through a QR factorization and raises SingularityError
    on rank deficiency; with ridge > 0 the augmented system is always
    full rank.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ConfigError("features and targets have incompatible shapes")
    n, d = X.shape
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    if ridge == 0.0 and n < d + 1:
        raise SingularityError("fewer rows than coefficients; use ridge > 0")

    xm = X.mean(axis=0)
    ym = float(y.mean())
    Xc = X - xm
    yc = y - ym
    if ridge > 0.0:
        A = np.vstack([Xc, math.sqrt(ridge) * np.eye(d)])
        b = np.concatenate([yc, np.zeros(d)])
    else:
        A = Xc
        b = yc
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if d > 0 and (diag.min() <= 1e-12 * max(diag.max(), 1.0)):
        if ridge == 0.0:
            raise SingularityError("design matrix is rank deficient")
    coef = np.linalg.solve(R, Q.T @ b) if d > 0 else np.zeros(0)
    intercept = ym - float(coef @ xm)
    resid = y - (intercept + X @ coef)
    diagnostics = {"residual_dot_max": float(np.max(np.abs(Xc.T @ resid))) if d else 0.0}
    return LinearModel(
        intercept=intercept,
        coef=coef,
        link="identity",
        feature_mean=xm,
        feature_scale=np.ones(d),
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# LASSO by coordinate descent
# ---------------------------------------------------------------------------

def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _cd_sweep_engine(Xf, w, r, denom, beta, lam, skip, tol, max_sweeps):
    """Sweep loop shared by the compiled and fallback paths.

    Works in place on `r` and `beta`; alternates full sweeps with sweeps over
    the active set and re-centers the intercept after every sweep.  Returns
    (accumulated intercept shift, number of sweeps).
    """
    n, d = Xf.shape
    sw = 0.0
    swr = 0.0
    for i in range(n):
        sw += w[i]
        swr += w[i] * r[i]
    shift = swr / sw
    beta0_delta = shift
    for i in range(n):
        r[i] -= shift
    n_sweeps = 0
    full_pass = True
    while n_sweeps < max_sweeps:
        n_sweeps += 1
        max_delta = 0.0
        for j in range(d):
            if skip[j]:
                continue
            bj = beta[j]
            if not full_pass and bj == 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += w[i] * Xf[i, j] * r[i]
            rho = rho / n + denom[j] * bj
            if rho > lam:
                new = (rho - lam) / denom[j]
            elif rho < -lam:
                new = (rho + lam) / denom[j]
            else:
                new = 0.0
            delta = new - bj
            if delta != 0.0:
                beta[j] = new
                for i in range(n):
                    r[i] -= delta * Xf[i, j]
                ad = abs(delta)
                if ad > max_delta:
                    max_delta = ad
        swr = 0.0
        for i in range(n):
            swr += w[i] * r[i]
        shift = swr / sw
        beta0_delta += shift
        for i in range(n):
            r[i] -= shift
        if max_delta < 1e-12:
            if full_pass:
                break
            full_pass = True
        else:
            full_pass = max_delta < tol * 1e-2
    return beta0_delta, n_sweeps


try:  # the compiled kernel makes penalized paths ~100x faster
    from numba import njit

    _cd_sweep_engine = njit(cache=True, nogil=True)(_cd_sweep_engine)
except ImportError:  # pragma: no cover - numba is an optional speedup
    pass


def _cd_weighted(Xf, X2f, z, w, lam, beta0, beta, tol, max_sweeps, skip: np.ndarray):
    """Coordinate descent for (1/2n) sum w_i (z_i - b0 - x_i beta)^2 + lam ||beta||_1.

    `Xf` is the standardized design in Fortran order and `X2f` its elementwise
    square, both precomputed once per fit.  Residuals are updated in place
    after every coefficient move; the sweep schedule lives in
    _cd_sweep_engine.  Returns (beta0, beta, n_sweeps, kkt_ok) where the KKT
    flags are for the weighted quadratic problem.
    """
    n, d = Xf.shape
    denom = (w @ X2f) / n  # per-coordinate curvature
    denom = np.where(denom > 0.0, denom, 1.0)
    r = z - beta0 - Xf @ beta  # working residual
    beta0_delta, n_sweeps = _cd_sweep_engine(
        Xf, np.ascontiguousarray(w), r, denom, beta,
        float(lam), np.ascontiguousarray(skip), float(tol), int(max_sweeps),
    )
    beta0 = beta0 + float(beta0_delta)
    score = ((w * r) @ Xf) / n
    active = beta != 0.0
    ok_zero = np.all(np.abs(score[~active & ~skip]) <= lam + tol) if np.any(~active & ~skip) else True
    ok_active = np.all(np.abs(score[active] - lam * np.sign(beta[active])) <= tol) if np.any(active) else True
    return beta0, beta, n_sweeps, bool(ok_zero and ok_active)


def _fortran_design(Xs):
    Xf = np.asfortranarray(Xs)
    return Xf, np.asfortranarray(Xf * Xf)


def _lasso_linear_standardized(Xf, X2f, y, lam, tol, max_sweeps, beta0, beta, skip):
    w = np.ones(Xf.shape[0])
    beta0, beta, sweeps, kkt_ok = _cd_weighted(
        Xf, X2f, y, w, lam, beta0, beta, tol, max_sweeps, skip
    )
    if not kkt_ok:
        raise ConvergenceError(
            f"LASSO coordinate descent failed the KKT check after {sweeps} sweeps"
        )
    return beta0, beta, sweeps


def _lasso_logistic_standardized(Xf, X2f, y, lam, tol, max_sweeps, beta0, beta, skip,
                                 max_outer=60, strict=True):
    """Proximal-Newton: quadratic approximation + weighted CD inner loop."""
    n = Xf.shape[0]
    sweeps_total = 0
    for _ in range(max_outer):
        eta = beta0 + Xf @ beta
        p = _sigmoid(eta)
        w = np.maximum(p * (1.0 - p), _WEIGHT_FLOOR)
        z = eta + (y - p) / w
        old0, old = beta0, beta.copy()
        beta0, beta, sweeps, _ = _cd_weighted(
            Xf, X2f, z, w, lam, beta0, beta.copy(), tol, max_sweeps, skip
        )
        sweeps_total += sweeps
        # KKT of the true logistic problem
        p = _sigmoid(beta0 + Xf @ beta)
        score = (y - p) @ Xf / n
        active = beta != 0.0
        viol_zero = np.max(np.abs(score[~active & ~skip])) - lam if np.any(~active & ~skip) else -np.inf
        viol_active = (
            np.max(np.abs(score[active] - lam * np.sign(beta[active])))
            if np.any(active)
            else 0.0
        )
        viol_int = abs(float(np.mean(y - p)))
        if viol_zero <= tol and viol_active <= tol and viol_int <= tol:
            return beta0, beta, sweeps_total
        if abs(beta0 - old0) < 1e-13 and np.max(np.abs(beta - old), initial=0.0) < 1e-13:
            break  # quadratic approximation has stalled
    if strict:
        raise ConvergenceError("logistic LASSO did not satisfy KKT conditions")
    return beta0, beta, sweeps_total


def lambda_max(X: np.ndarray, y: np.ndarray, family: str = "linear") -> float:
    """Smallest penalty that zeroes every slope (standardized coordinates)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    Xs, _, _, degenerate = _standardize(X)
    n = X.shape[0]
    if family == "linear":
        score = Xs.T @ (y - y.mean()) / n
    elif family == "logistic":
        p = float(y.mean())
        score = Xs.T @ (y - p) / n
    else:
        raise ConfigError(f"unknown family {family!r}")
    score[degenerate] = 0.0
    return float(np.max(np.abs(score))) if score.size else 0.0


def default_lambda_grid(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "linear",
    n_lambdas: int = 50,
    min_ratio: float = 1e-3,
) -> np.ndarray:
    """Log-spaced grid from lambda_max down to min_ratio * lambda_max."""
    lmax = lambda_max(X, y, family)
    if lmax <= 0:
        lmax = 1e-3
    return np.geomspace(lmax, min_ratio * lmax, n_lambdas)


def fit_lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "linear",
    lam: float = 1.0,
    tol: float = 1e-6,
    max_sweeps: int = 10_000,
) -> LinearModel:
    """L1-penalized fit at a single penalty value.

    Solves (1/2n)||y - b0 - X b||^2 + lam*||b||_1 (linear family) or the
    mean logistic deviance plus the same penalty, with the penalty applied
    on standardized coordinates and the intercept unpenalized.  The solution
    satisfies the KKT subgradient conditions within `tol`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if lam <= 0:
        raise ConfigError("lam must be > 0")
    if family not in ("linear", "logistic"):
        raise ConfigError(f"unknown family {family!r}")
    if family == "logistic" and np.unique(y).size < 2:
        raise DegenerateLabelsError("labels contain a single class")
    n, d = X.shape
    Xs, mean, scale, degenerate = _standardize(X)
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} constant feature column(s) dropped from the penalized fit",
            RuntimeWarning,
            stacklevel=2,
        )
    beta = np.zeros(d)
    beta0 = float(y.mean()) if family == "linear" else 0.0
    Xf, X2f = _fortran_design(Xs)
    if family == "linear":
        beta0, beta, sweeps = _lasso_linear_standardized(
            Xf, X2f, y, lam, tol, max_sweeps, beta0, beta, degenerate
        )
    else:
        beta0, beta, sweeps = _lasso_logistic_standardized(
            Xf, X2f, y, lam, tol, max_sweeps, beta0, beta, degenerate
        )
    link = "identity" if family == "linear" else "logit"
    diagnostics = {"n_sweeps": sweeps, "lam": lam}
    return _model_from_standardized(beta0, beta, link, mean, scale, diagnostics)


@dataclass(frozen=True)
class LassoPath:
    """Warm-started solutions along a decreasing penalty grid."""

    lambdas: np.ndarray
    models: tuple
    cv_losses: np.ndarray | None = None
    best_index: int | None = None

    @property
    def best_model(self) -> LinearModel:
        if self.best_index is None:
            raise ConfigError("path was fit without cross-validation")
        return self.models[self.best_index]


def lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "linear",
    lambdas: np.ndarray | None = None,
    tol: float = 1e-6,
    max_sweeps: int = 10_000,
    strict: bool = True,
) -> LassoPath:
    """Fit the whole penalty path with warm starts (largest penalty first)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if lambdas is None:
        lambdas = default_lambda_grid(X, y, family)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.size == 0:
        raise ConfigError("empty penalty grid")
    if np.any(np.diff(lambdas) > 0):
        lambdas = np.sort(lambdas)[::-1]
    n, d = X.shape
    Xs, mean, scale, degenerate = _standardize(X)
    Xf, X2f = _fortran_design(Xs)
    beta = np.zeros(d)
    beta0 = float(y.mean()) if family == "linear" else 0.0
    link = "identity" if family == "linear" else "logit"
    models = []
    for lam in lambdas:
        if family == "linear":
            beta0, beta, _ = _lasso_linear_standardized(
                Xf, X2f, y, float(lam), tol, max_sweeps, beta0, beta.copy(), degenerate
            )
        else:
            beta0, beta, _ = _lasso_logistic_standardized(
                Xf, X2f, y, float(lam), tol, max_sweeps, beta0, beta.copy(), degenerate,
                strict=strict,
            )
        models.append(
            _model_from_standardized(beta0, beta.copy(), link, mean, scale, {"lam": float(lam)})
        )
    return LassoPath(lambdas=lambdas, models=tuple(models))


def lasso_cv(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "linear",
    lambdas: np.ndarray | None = None,
    n_folds: int = 5,
    seed: int = 0,
    tol: float = 1e-6,
    max_sweeps: int = 10_000,
) -> LassoPath:
    """K-fold cross-validation over the penalty path; selects min CV loss.

    Loss is mean squared error (linear) or mean deviance (logistic).
    The returned path is refit on the full data at every grid value.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = X.shape[0]
    if lambdas is None:
        lambdas = default_lambda_grid(X, y, family)
    lambdas = np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, n_folds)
    losses = np.zeros((n_folds, lambdas.size))
    for k, hold in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[hold] = False
        if family == "logistic" and np.unique(y[mask]).size < 2:
            losses[k, :] = np.nan
            continue
        path = lasso_path(
            X[mask], y[mask], family, lambdas, tol=tol, max_sweeps=max_sweeps, strict=False
        )
        for i, model in enumerate(path.models):
            pred = model.predict(X[hold])
            if family == "linear":
                losses[k, i] = float(np.mean((y[hold] - pred) ** 2))
            else:
                p = np.clip(pred, _PROB_FLOOR, 1 - _PROB_FLOOR)
                losses[k, i] = float(
                    -np.mean(y[hold] * np.log(p) + (1 - y[hold]) * np.log1p(-p))
                )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cv = np.nanmean(losses, axis=0)
    best = int(np.nanargmin(cv))
    full = lasso_path(X, y, family, lambdas, tol=tol, max_sweeps=max_sweeps, strict=False)
    return LassoPath(
        lambdas=lambdas, models=full.models, cv_losses=cv, best_index=best
    )


# ---------------------------------------------------------------------------
# Stability selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityResult:
    selected: np.ndarray        # indices of stable features
    frequencies: np.ndarray     # per-feature max selection frequency over the grid
    n_skipped: int              # subsamples skipped for degenerate labels


def stability_selection(
    X: np.ndarray,
    y: np.ndarray,
    lambda_grid: np.ndarray | None = None,
    n_subsamples: int = 100,
    subsample_fraction: float = 0.5,
    threshold: float = 0.6,
    seed: int = 0,
    tol: float = 1e-5,
    max_sweeps: int = 2_000,
    max_active: int | None = None,
) -> StabilityResult:
    """Subsampled logistic-LASSO support frequencies, thresholded.

    A feature is selected when its selection frequency at some grid value
    reaches `threshold`.  Grid points whose support grows beyond
    `max_active` (default about sqrt(0.8*d)) are not counted and end that
    subsample's path walk: stability control needs the per-fit selections
    to stay sparse.  Subsamples whose labels collapse to one class are
    skipped and counted.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = X.shape
    if n_subsamples < 20:
        raise ConfigError("n_subsamples must be >= 20")
    if not 0.0 < subsample_fraction <= 1.0:
        raise ConfigError("subsample_fraction must be in (0, 1]")
    if not 0.0 < threshold <= 1.0:
        raise ConfigError("threshold must be in (0, 1]")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(X, y, "logistic", n_lambdas=15, min_ratio=0.1)
    lambda_grid = np.asarray(lambda_grid, dtype=np.float64)
    if lambda_grid.size == 0:
        raise ConfigError("empty penalty grid")
    lambda_grid = np.sort(lambda_grid)[::-1]
    if max_active is None:
        max_active = max(1, int(math.ceil(math.sqrt(0.8 * d))))

    rng = np.random.default_rng(seed)
    m = max(2, int(math.floor(subsample_fraction * n)))
    counts = np.zeros((lambda_grid.size, d))
    n_used = 0
    n_skipped = 0
    for _ in range(n_subsamples):
        idx = rng.choice(n, size=m, replace=False)
        yb = y[idx]
        if np.unique(yb).size < 2:
            n_skipped += 1
            continue
        Xs, _, _, degenerate = _standardize(X[idx])
        Xf, X2f = _fortran_design(Xs)
        beta = np.zeros(d)
        beta0 = 0.0
        for i, lam in enumerate(lambda_grid):
            beta0, beta, _ = _lasso_logistic_standardized(
                Xf, X2f, yb, float(lam), tol, max_sweeps, beta0, beta.copy(), degenerate,
                strict=False,
            )
            # ignore KKT-boundary crumbs (duplicate columns make the L1
            # solution non-unique up to ~1e-16 coefficient noise)
            support = np.abs(beta) > 1e-10
            if int(support.sum()) > max_active:
                break
            counts[i] += support
        n_used += 1
    if n_used == 0:
        raise DegenerateLabelsError("every subsample had single-class labels")
    freq = counts.max(axis=0) / n_used
    selected = np.flatnonzero(freq >= threshold)
    return StabilityResult(selected=selected, frequencies=freq, n_skipped=n_skipped)
