"""Nuisance estimation for the conditional-distribution test.

Three objects are fitted here:

* the marginal covariate density ratio (second-sample density over
  first-sample density), via probabilistic classification;
* the pairwise score, a conditional density ratio oriented so that points
  typical of the *first* sample's conditional score high;
* the comparison-mean regression: the average comparison indicator against
  the training second-sample points, regressed on covariates.

All solvers come from udebias.solvers; selection is by name string.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    InsufficientDataError,
    NuisanceFitError,
)
from .solvers import (
    LinearModel,
    fit_logistic_irls,
    fit_ols,
    default_lambda_grid,
    lasso_cv,
    stability_selection,
)
from .ustat import Sample

PROB_FLOOR = 1e-6  # classifier probabilities are kept inside (0, 1) by this margin

__all__ = [
    "NuisanceBundle",
    "NuisanceConfig",
    "fit_density_ratio",
    "fit_score_s",
    "fit_alpha",
    "train_bundle",
    "make_classifier",
    "make_regressor",
]


@dataclass(frozen=True)
class NuisanceBundle:
    """Fitted predictors: density ratio gamma(x), comparison mean alpha(x),
    and pair score s(x, y).  All are pure batch functions of arrays."""

    gamma: Callable[[np.ndarray], np.ndarray]
    score: Callable[[np.ndarray, np.ndarray], np.ndarray]
    alpha: Callable[[np.ndarray], np.ndarray] | None = None


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------

def _floor_probs(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


class LogisticClassifier:
    """Unpenalized (up to a tiny ridge) logistic regression."""

    def __init__(self, ridge_eps: float = 1e-6, tol: float = 1e-8, max_iter: int = 100):
        self.ridge_eps = ridge_eps
        self.tol = tol
        self.max_iter = max_iter
        self.model: LinearModel | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticClassifier":
        self.model = fit_logistic_irls(
            X, y, ridge_eps=self.ridge_eps, tol=self.tol, max_iter=self.max_iter
        )
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _floor_probs(self.model.predict(X))


class LassoLogisticClassifier:
    """L1-penalized logistic regression, penalty chosen by cross-validation.

    With `refit` the cross-validated path only picks the support and an
    unpenalized logistic fit on it produces the predictions, trading the L1
    shrinkage bias for extra variance.
    """

    def __init__(self, n_lambdas: int = 50, lambda_min_ratio: float = 1e-3,
                 cv_folds: int = 5, seed: int = 0, refit: bool = False):
        self.n_lambdas = n_lambdas
        self.lambda_min_ratio = lambda_min_ratio
        self.cv_folds = cv_folds
        self.seed = seed
        self.refit = refit
        self.selected: np.ndarray | None = None
        self.model: LinearModel | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LassoLogisticClassifier":
        grid = default_lambda_grid(X, y, "logistic", self.n_lambdas, self.lambda_min_ratio)
        path = lasso_cv(X, y, "logistic", grid, n_folds=self.cv_folds, seed=self.seed)
        self.model = path.best_model
        self.selected = np.flatnonzero(np.abs(self.model.coef) > 1e-10)
        if self.refit and self.selected.size > 0:
            self.model = None  # predictions come from the refit below
            self._refit = fit_logistic_irls(X[:, self.selected], y)
        else:
            self._refit = None
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self._refit is not None:
            return _floor_probs(self._refit.predict(X[:, self.selected]))
        return _floor_probs(self.model.predict(X))


class StabilityLogisticClassifier:
    """Stability selection for support, then plain logistic regression on it.

    Falls back to an intercept-only predictor when nothing is selected.
    The selected indices are kept on `self.selected` for reuse downstream.
    """

    def __init__(self, n_subsamples: int = 100, subsample_fraction: float = 0.5,
                 threshold: float = 0.6, n_lambdas: int = 25,
                 lambda_min_ratio: float = 1e-2, seed: int = 0):
        self.n_subsamples = n_subsamples
        self.subsample_fraction = subsample_fraction
        self.threshold = threshold
        self.n_lambdas = n_lambdas
        self.lambda_min_ratio = lambda_min_ratio
        self.seed = seed
        self.selected: np.ndarray | None = None
        self.model: LinearModel | None = None
        self._const: float | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "StabilityLogisticClassifier":
        grid = default_lambda_grid(X, y, "logistic", self.n_lambdas, self.lambda_min_ratio)
        result = stability_selection(
            X, y, grid,
            n_subsamples=self.n_subsamples,
            subsample_fraction=self.subsample_fraction,
            threshold=self.threshold,
            seed=self.seed,
        )
        self.selected = result.selected
        if self.selected.size == 0:
            self._const = float(np.mean(y))
            self.model = None
        else:
            self.model = fit_logistic_irls(X[:, self.selected], y)
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.model is None:
            return _floor_probs(np.full(X.shape[0], self._const))
        return _floor_probs(self.model.predict(X[:, self.selected]))


class OracleClassifier:
    """Bayes posterior for a known density ratio; used on synthetic models.

    After `fit` records the class counts, the posterior for class 1 at x is
    n1*r(x) / (n1*r(x) + n0) where r is the true class-1/class-0 density
    ratio, so the classification recipe inverts it back exactly.
    """

    def __init__(self, ratio_fn: Callable[[np.ndarray], np.ndarray]):
        self.ratio_fn = ratio_fn
        self.n0 = self.n1 = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "OracleClassifier":
        y = np.asarray(y).ravel()
        self.n0 = int(np.sum(y == 0))
        self.n1 = int(np.sum(y == 1))
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        r = np.asarray(self.ratio_fn(X), dtype=np.float64)
        return _floor_probs(self.n1 * r / (self.n1 * r + self.n0))


# ---------------------------------------------------------------------------
# Regressors
# ---------------------------------------------------------------------------

class OLSRegressor:
    def __init__(self, ridge: float = 0.0):
        self.ridge = ridge
        self.model: LinearModel | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "OLSRegressor":
        self.model = fit_ols(X, y, ridge=self.ridge)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict(X)


class LassoRegressor:
    """Linear LASSO with cross-validated penalty, optionally restricted to a
    candidate feature subset (used after variable selection for the score).

    With `refit` the penalized path only selects the support; ordinary least
    squares on the selected columns gives the final predictor.
    """

    def __init__(self, n_lambdas: int = 50, lambda_min_ratio: float = 1e-3,
                 cv_folds: int = 5, seed: int = 0,
                 feature_subset: np.ndarray | None = None, refit: bool = False):
        self.n_lambdas = n_lambdas
        self.lambda_min_ratio = lambda_min_ratio
        self.cv_folds = cv_folds
        self.seed = seed
        self.refit = refit
        self.feature_subset = (
            np.asarray(feature_subset, dtype=np.int64) if feature_subset is not None else None
        )
        self.model: LinearModel | None = None
        self._refit_cols: np.ndarray | None = None

    def _cols(self, X: np.ndarray) -> np.ndarray:
        if self.feature_subset is None or self.feature_subset.size == 0:
            return X
        return X[:, self.feature_subset]

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LassoRegressor":
        Xr = self._cols(np.asarray(X, dtype=np.float64))
        grid = default_lambda_grid(Xr, y, "linear", self.n_lambdas, self.lambda_min_ratio)
        path = lasso_cv(Xr, y, "linear", grid, n_folds=self.cv_folds, seed=self.seed)
        self.model = path.best_model
        self._refit_cols = None
        if self.refit:
            support = np.flatnonzero(np.abs(self.model.coef) > 1e-10)
            if 0 < support.size < Xr.shape[0] - 1:
                self._refit_cols = support
                self.model = fit_ols(Xr[:, support], y)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xr = self._cols(np.asarray(X, dtype=np.float64))
        if self._refit_cols is not None:
            Xr = Xr[:, self._refit_cols]
        return self.model.predict(Xr)


class OracleRegressor:
    """Returns a fixed known function; fit is a no-op."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def fit(self, X: np.ndarray, y: np.ndarray) -> "OracleRegressor":
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(X), dtype=np.float64)


# ---------------------------------------------------------------------------
# Configuration and registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NuisanceConfig:
    """Solver selection and knobs for nuisance fitting.

    `score_predictor` carries the pre-fitted pair score (fixed before
    cross-fitting); `oracle` short-circuits all fitting with a synthetic
    model's true functions.
    """

    classifier: str = "logistic"
    regressor: str = "ols"
    score_classifier: str | None = None  # defaults to `classifier`
    clip: tuple = (0.02, 50.0)
    ridge: float = 1.0
    n_lambdas: int = 50
    lambda_min_ratio: float = 1e-3
    cv_folds: int = 5
    stability_subsamples: int = 100
    stability_fraction: float = 0.5
    stability_threshold: float = 0.6
    stability_n_lambdas: int = 15
    stability_min_ratio: float = 0.1
    score_predictor: Callable | None = field(default=None, compare=False)
    oracle: object | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "classifier": self.classifier,
            "regressor": self.regressor,
            "score_classifier": self.score_classifier,
            "clip": [float(self.clip[0]), float(self.clip[1])],
            "ridge": float(self.ridge),
            "n_lambdas": int(self.n_lambdas),
            "lambda_min_ratio": float(self.lambda_min_ratio),
            "cv_folds": int(self.cv_folds),
            "stability_subsamples": int(self.stability_subsamples),
            "stability_fraction": float(self.stability_fraction),
            "stability_threshold": float(self.stability_threshold),
            "stability_n_lambdas": int(self.stability_n_lambdas),
            "stability_min_ratio": float(self.stability_min_ratio),
            "oracle": self.oracle is not None,
        }


def make_classifier(name: str, cfg: NuisanceConfig, seed: int = 0):
    if name == "logistic":
        return LogisticClassifier()
    if name == "lasso-logistic":
        return LassoLogisticClassifier(
            n_lambdas=cfg.n_lambdas,
            lambda_min_ratio=cfg.lambda_min_ratio,
            cv_folds=cfg.cv_folds,
            seed=seed,
        )
    if name == "stability+logistic":
        return StabilityLogisticClassifier(
            n_subsamples=cfg.stability_subsamples,
            subsample_fraction=cfg.stability_fraction,
            threshold=cfg.stability_threshold,
            n_lambdas=cfg.stability_n_lambdas,
            lambda_min_ratio=cfg.stability_min_ratio,
            seed=seed,
        )
    raise ConfigError(f"unknown classifier {name!r}")


def make_regressor(name: str, cfg: NuisanceConfig, seed: int = 0,
                   feature_subset: np.ndarray | None = None):
    if name == "ols":
        return OLSRegressor(ridge=0.0)
    if name == "ridge":
        return OLSRegressor(ridge=cfg.ridge)
    if name == "lasso":
        return LassoRegressor(
            n_lambdas=cfg.n_lambdas,
            lambda_min_ratio=cfg.lambda_min_ratio,
            cv_folds=cfg.cv_folds,
            seed=seed,
            feature_subset=feature_subset,
        )
    raise ConfigError(f"unknown regressor {name!r}")


# ---------------------------------------------------------------------------
# The three fits
# ---------------------------------------------------------------------------

def fit_density_ratio(
    xs: np.ndarray,
    us: np.ndarray,
    classifier,
    clip: tuple = (0.02, 50.0),
) -> Callable[[np.ndarray], np.ndarray]:
    """Marginal density ratio of the second sample over the first.

    The classifier is trained with the first sample as class 0 and the
    second as class 1; the posterior odds times the class-count ratio
    m/n recovers the density ratio, which is then clipped.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    us = np.atleast_2d(np.asarray(us, dtype=np.float64))
    if xs.shape[0] == 0 or us.shape[0] == 0:
        raise InsufficientDataError("both samples must be non-empty")
    if xs.shape[1] != us.shape[1]:
        raise ConfigError(
            f"feature dimension mismatch: {xs.shape[1]} vs {us.shape[1]}"
        )
    m, n = xs.shape[0], us.shape[0]
    X = np.vstack([xs, us])
    y = np.concatenate([np.zeros(m), np.ones(n)])
    classifier.fit(X, y)
    lo, hi = float(clip[0]), float(clip[1])
    prior = m / n

    def ratio(query: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(query, dtype=np.float64))
        p = _floor_probs(np.asarray(classifier.predict_proba(q), dtype=np.float64))
        return np.clip(prior * p / (1.0 - p), lo, hi)

    selected = getattr(classifier, "selected", None)
    ratio.x_support = None if selected is None else np.asarray(selected, dtype=np.int64)
    return ratio


class ScorePredictor:
    """Pair score: conditional density ratio of the first sample's response
    law over the second's, evaluated pointwise.

    Computed as marginal_ratio(x) / clip(joint_ratio(x, y)); large values
    mark observations that look like the first sample's conditional.
    `x_support` records covariate indices picked by the joint classifier's
    variable selection, when it performs any.
    """

    def __init__(self, joint_ratio, marginal_ratio, x_support=None):
        self._joint = joint_ratio
        self._marginal = marginal_ratio
        self.x_support = x_support

    def __call__(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        joint = np.column_stack([X, y])
        return self._marginal(X) / self._joint(joint)


def fit_score_s(
    xs: Sample,
    us: Sample,
    classifier,
    marginal_gamma,
    clip: tuple = (0.02, 50.0),
) -> ScorePredictor:
    """Fit the pair score from joint (covariates, response) classification.

    The same classification recipe as fit_density_ratio runs on the joint
    vectors; dividing the marginal ratio by the clipped joint ratio leaves
    the conditional ratio of the first sample's response law over the
    second's.  Any fixed score keeps the test valid; accuracy only affects
    power.
    """
    joint_x = np.column_stack([xs.x, xs.y])
    joint_u = np.column_stack([us.x, us.y])
    joint_ratio = fit_density_ratio(joint_x, joint_u, classifier, clip)
    # x-covariates the score can actually depend on: the joint classifier's
    # selection plus whatever the marginal-ratio fit selected
    d = xs.x.shape[1]
    supports = []
    selected = getattr(classifier, "selected", None)
    if selected is not None:
        supports.append(np.asarray([j for j in selected if j < d], dtype=np.int64))
    marg_support = getattr(marginal_gamma, "x_support", None)
    if marg_support is not None:
        supports.append(np.asarray(marg_support, dtype=np.int64))
    x_support = None
    if supports:
        x_support = np.unique(np.concatenate(supports)) if len(supports) > 1 else supports[0]
    return ScorePredictor(joint_ratio, marginal_gamma, x_support=x_support)


def fit_alpha(
    train_xs: Sample,
    train_us: Sample,
    a_fn,
    regressor,
) -> Callable[[np.ndarray], np.ndarray]:
    """Regress the partial comparison average on covariates.

    For every training first-sample point, the comparison indicator is
    averaged over all training second-sample points; the regressor then
    predicts that average from covariates only (the response never enters
    the features).
    """
    if len(train_us) == 0:
        raise InsufficientDataError("no second-sample points to average against")
    a_matrix = np.asarray(a_fn(train_xs, train_us), dtype=np.float64)
    a_star = a_matrix.mean(axis=1)
    regressor.fit(train_xs.x, a_star)
    return regressor.predict


def train_bundle(
    train_xs: Sample,
    train_us: Sample,
    config: NuisanceConfig,
    seed: int = 0,
    need_alpha: bool = True,
) -> NuisanceBundle:
    """Fit the per-fold nuisances on a training complement.

    The pair score must be supplied pre-fitted (`config.score_predictor`)
    or through an oracle model; it is reused unchanged across folds.
    """
    if config.oracle is not None:
        model = config.oracle
        lo, hi = config.clip

        def oracle_gamma(X):
            return np.clip(model.density_ratio(X), lo, hi)

        return NuisanceBundle(
            gamma=oracle_gamma,
            score=model.score,
            alpha=model.comparison_mean if need_alpha else None,
        )

    score = config.score_predictor
    if score is None:
        raise ConfigError("no pre-fitted score available; fit one or provide an oracle")

    try:
        clf = make_classifier(config.classifier, config, seed=seed)
        gamma = fit_density_ratio(train_xs.x, train_us.x, clf, config.clip)
    except Exception as exc:  # noqa: BLE001
        raise NuisanceFitError("density-ratio", exc) from exc

    alpha = None
    if need_alpha:
        from .covshift import comparison_matrix  # deferred: avoids an import cycle

        def a_fn(p_sample, q_sample):
            return comparison_matrix(score, p_sample, q_sample)

        subset = None
        if config.regressor == "lasso":
            subset = getattr(score, "x_support", None)
            if subset is not None and len(subset) == 0:
                subset = None
        try:
            reg = make_regressor(config.regressor, config, seed=seed + 1, feature_subset=subset)
            alpha = fit_alpha(train_xs, train_us, a_fn, reg)
        except Exception as exc:  # noqa: BLE001
            raise NuisanceFitError("comparison-mean regression", exc) from exc

    return NuisanceBundle(gamma=gamma, score=score, alpha=alpha)


def replace_config(config: NuisanceConfig, **kwargs) -> NuisanceConfig:
    return replace(config, **kwargs)
