import math

import numpy as np
import pytest

from udebias.covshift import (
    TestConfig,
    comparison_a,
    comparison_matrix,
    debiased_kernel,
    draw_tags,
    influence_mean_zero_check,
    plugin_kernel,
    run_test,
    run_test_multi,
)
from udebias.errors import ConfigError, InsufficientDataError, ScoreError
from udebias.nuisance import NuisanceBundle, NuisanceConfig
from udebias.simlab import GaussianShiftModel, sample_with_cutoff
from udebias.ustat import (
    FoldGrid,
    LabeledPoint,
    Sample,
    aggregate,
    cross_fit_evaluations,
    make_fold_grid,
    normal_cdf,
    variance_estimate,
)


def fixed_score(values_by_y):
    """Score that looks up s by the response value (unique ids in tests)."""

    def s(X, y):
        return np.asarray([values_by_y[float(v)] for v in np.asarray(y).ravel()])

    return s


def point(xv, yv, zeta):
    return LabeledPoint(x=np.array([xv]), y=yv, zeta=zeta)


class TestComparisonA:
    def test_strict_order_dominates(self):
        s = fixed_score({1.0: 1.0, 2.0: 2.0})
        assert comparison_a(point(0, 1.0, 0.9), point(0, 2.0, 0.1), s, 0.9, 0.1) == 1.0

    def test_tie_break_rule(self):
        s = fixed_score({1.0: 3.0, 2.0: 3.0})
        assert comparison_a(point(0, 1.0, 0.3), point(0, 2.0, 0.7), s, 0.3, 0.7) == 1.0
        assert comparison_a(point(0, 1.0, 0.7), point(0, 2.0, 0.3), s, 0.7, 0.3) == 0.0

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        scores = {float(i): v for i, v in enumerate(rng.integers(0, 4, 30).astype(float))}
        s = fixed_score(scores)
        zeta = rng.random(30)
        for i in range(0, 30, 2):
            p, q = point(0, float(i), zeta[i]), point(0, float(i + 1), zeta[i + 1])
            total = comparison_a(p, q, s, zeta[i], zeta[i + 1]) + comparison_a(
                q, p, s, zeta[i + 1], zeta[i]
            )
            assert total == 1.0

    def test_non_finite_score_raises(self):
        s = fixed_score({1.0: float("nan"), 2.0: 1.0})
        with pytest.raises(ScoreError):
            comparison_a(point(0, 1.0, 0.5), point(0, 2.0, 0.5), s, 0.5, 0.5)


def tagged_samples(rng, m=40, n=30, dim=2):
    xs = Sample(x=rng.standard_normal((m, dim)), y=rng.standard_normal(m),
                zeta=rng.random(m))
    us = Sample(x=rng.standard_normal((n, dim)), y=rng.standard_normal(n),
                zeta=rng.random(n))
    return xs, us


def residual_score(beta, shift):
    def s(X, y):
        resid = np.asarray(y, dtype=float).ravel() - np.atleast_2d(X) @ beta
        return np.exp(-shift * resid + 0.5 * shift**2)

    return s


class TestKernels:
    def test_plugin_substitution(self):
        bundle = NuisanceBundle(
            gamma=lambda X: np.full(np.atleast_2d(X).shape[0], 2.0),
            score=fixed_score({1.0: 1.0, 2.0: 2.0}),
        )
        k = plugin_kernel(bundle)
        assert k(point(0, 1.0, 0.2), point(0, 2.0, 0.8)) == pytest.approx(2.0, abs=0)

    def test_debiased_substitution(self):
        # gamma=2, a=1, alpha(u)=0.3, alpha(x)=0.4 -> 2 + 0.3 - 0.8 = 1.5
        alpha = {0.0: 0.4, 5.0: 0.3}
        bundle = NuisanceBundle(
            gamma=lambda X: np.full(np.atleast_2d(X).shape[0], 2.0),
            score=fixed_score({1.0: 1.0, 2.0: 2.0}),
            alpha=lambda X: np.asarray([alpha[float(v)] for v in np.atleast_2d(X)[:, 0]]),
        )
        k = debiased_kernel(bundle)
        p = LabeledPoint(x=np.array([0.0]), y=1.0, zeta=0.2)
        q = LabeledPoint(x=np.array([5.0]), y=2.0, zeta=0.8)
        assert k(p, q) == pytest.approx(1.5, abs=1e-15)

    def test_zero_alpha_reduces_to_plugin(self):
        rng = np.random.default_rng(1)
        xs, us = tagged_samples(rng)
        bundle = NuisanceBundle(
            gamma=lambda X: 1.0 + np.abs(np.atleast_2d(X)[:, 0]),
            score=residual_score(np.array([1.0, -1.0]), 0.5),
            alpha=lambda X: np.zeros(np.atleast_2d(X).shape[0]),
        )
        plug = plugin_kernel(bundle).grid(xs, us)
        deb = debiased_kernel(bundle).grid(xs, us)
        assert np.array_equal(plug, deb)

    def test_constant_alpha_cancels_when_gamma_is_one(self):
        rng = np.random.default_rng(2)
        xs, us = tagged_samples(rng)
        bundle = NuisanceBundle(
            gamma=lambda X: np.ones(np.atleast_2d(X).shape[0]),
            score=residual_score(np.array([1.0, -1.0]), 0.5),
            alpha=lambda X: np.full(np.atleast_2d(X).shape[0], 0.37),
        )
        deb = debiased_kernel(bundle).grid(xs, us)
        a = comparison_matrix(bundle.score, xs, us)
        assert np.allclose(deb, a, atol=1e-15)

    def test_unit_gamma_rank_kernel_is_centered(self):
        # exchangeable data with gamma = 1: the pair mean is 1/2 on average
        rng = np.random.default_rng(3)
        means = []
        score = residual_score(np.array([1.0, -1.0]), 0.5)
        bundle = NuisanceBundle(
            gamma=lambda X: np.ones(np.atleast_2d(X).shape[0]), score=score
        )
        for _ in range(60):
            xs, us = tagged_samples(rng, m=50, n=50)
            means.append(plugin_kernel(bundle).grid(xs, us).mean())
        means = np.asarray(means)
        se = means.std(ddof=1) / math.sqrt(len(means))
        assert abs(means.mean() - 0.5) <= 3 * se

    def test_plugin_true_ratio_unbiased_after_cutoff(self):
        model = GaussianShiftModel.lowdim(alternative=False)
        bundle = NuisanceBundle(gamma=model.density_ratio, score=model.score)
        rng = np.random.default_rng(4)
        means = []
        for _ in range(50):
            xs = sample_with_cutoff(model, 150, rng, shifted=False)
            us = sample_with_cutoff(model, 150, rng, shifted=True)
            tags = draw_tags(150, 150, rng)
            xs, us = xs.with_tags(tags.zeta_x), us.with_tags(tags.zeta_u)
            means.append(plugin_kernel(bundle).grid(xs, us).mean())
        means = np.asarray(means)
        se = means.std(ddof=1) / math.sqrt(len(means))
        assert abs(means.mean() - 0.5) <= 3 * se

    def test_plugin_bounded_by_clipped_gamma(self):
        rng = np.random.default_rng(5)
        xs, us = tagged_samples(rng)
        hi = 7.5
        bundle = NuisanceBundle(
            gamma=lambda X: np.clip(np.exp(np.atleast_2d(X)[:, 0]), 0.1, hi),
            score=residual_score(np.array([1.0, -1.0]), 0.5),
        )
        vals = plugin_kernel(bundle).grid(xs, us)
        assert np.all(vals >= 0.0)
        assert np.all(vals <= hi)

    def test_grid_matches_scalar_calls(self):
        rng = np.random.default_rng(6)
        xs, us = tagged_samples(rng, m=7, n=5)
        bundle = NuisanceBundle(
            gamma=lambda X: 1.0 + np.abs(np.atleast_2d(X)[:, 1]),
            score=residual_score(np.array([0.5, 1.0]), 0.3),
            alpha=lambda X: np.tanh(np.atleast_2d(X)[:, 0]),
        )
        k = debiased_kernel(bundle)
        grid = k.grid(xs, us)
        for i in range(7):
            for j in range(5):
                assert grid[i, j] == pytest.approx(k(xs.point(i), us.point(j)), abs=1e-12)

    def test_rank_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(7)
        xs, us = tagged_samples(rng)
        base = residual_score(np.array([1.0, -1.0]), 0.5)

        def transformed(X, y):
            return 3.0 * np.exp(base(X, y)) + 1.0

        a1 = comparison_matrix(base, xs, us)
        a2 = comparison_matrix(transformed, xs, us)
        assert np.array_equal(a1, a2)

    def test_missing_tags_rejected(self):
        rng = np.random.default_rng(8)
        xs, us = tagged_samples(rng)
        xs_untagged = Sample(x=xs.x, y=xs.y)
        bundle = NuisanceBundle(
            gamma=lambda X: np.ones(np.atleast_2d(X).shape[0]),
            score=residual_score(np.array([1.0, -1.0]), 0.5),
        )
        with pytest.raises(ConfigError):
            plugin_kernel(bundle).grid(xs_untagged, us)


class TestInfluenceMeanZero:
    def test_exact_cancellation(self):
        rng = np.random.default_rng(9)
        xs, us = tagged_samples(rng)
        bundle = NuisanceBundle(
            gamma=lambda X: np.ones(np.atleast_2d(X).shape[0]),
            score=residual_score(np.array([1.0, -1.0]), 0.5),
            alpha=lambda X: np.full(np.atleast_2d(X).shape[0], 0.42),
        )
        assert influence_mean_zero_check(bundle, xs, us) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("alternative", [False, True])
    def test_true_nuisances_mean_zero(self, alternative):
        model = GaussianShiftModel.lowdim(alternative=alternative)
        rng = np.random.default_rng(10)

        # Monte Carlo oracle for the comparison mean at a few covariate points:
        # draw responses from the reference conditional and fresh shifted pairs.
        def alpha_mc(x, n_draws=40_000):
            y = x @ model.beta + rng.standard_normal(n_draws)
            uv = model.sample_shifted(n_draws, rng)
            sx = model.score(np.tile(x, (n_draws, 1)), y)
            su = model.score(uv.x, uv.y)
            zx, zu = rng.random(n_draws), rng.random(n_draws)
            a = (sx < su) | ((sx == su) & (zx < zu))
            return a.mean()

        closed_form = normal_cdf(-model.response_shift / math.sqrt(2.0))
        for _ in range(3):
            x = rng.standard_normal(5)
            assert alpha_mc(x) == pytest.approx(closed_form, abs=0.01)

        bundle = NuisanceBundle(
            gamma=model.density_ratio, score=model.score, alpha=model.comparison_mean
        )
        m = n = 2000
        xs = sample_with_cutoff(model, m, rng, shifted=False)
        us = sample_with_cutoff(model, n, rng, shifted=True)
        tags = draw_tags(m, n, rng)
        xs, us = xs.with_tags(tags.zeta_x), us.with_tags(tags.zeta_u)
        mean = influence_mean_zero_check(bundle, xs, us)
        g_alpha = model.density_ratio(xs.x) * model.comparison_mean(xs.x)
        a_u = model.comparison_mean(us.x)
        se = math.sqrt(np.var(a_u) / n + np.var(g_alpha) / m)
        assert abs(mean) <= 3 * se + 1e-12


class TestRunTest:
    def test_bit_identical_reports(self):
        model = GaussianShiftModel.lowdim(alternative=False)
        rng = np.random.default_rng(11)
        xs = sample_with_cutoff(model, 120, rng, shifted=False)
        us = sample_with_cutoff(model, 120, rng, shifted=True)
        cfg = TestConfig(seed=5)
        r1 = run_test(xs, us, cfg)
        r2 = run_test(xs, us, cfg)
        assert r1.to_dict() == r2.to_dict()

    def test_shared_randomness_between_methods(self):
        model = GaussianShiftModel.lowdim(alternative=False)
        rng = np.random.default_rng(12)
        xs = sample_with_cutoff(model, 120, rng, shifted=False)
        us = sample_with_cutoff(model, 120, rng, shifted=True)
        both = run_test_multi(xs, us, TestConfig(seed=6), methods=("debiased", "plugin"))
        solo = run_test(xs, us, TestConfig(seed=6, method="plugin"))
        assert both["plugin"].to_dict() == solo.to_dict()

    def test_insufficient_data(self):
        rng = np.random.default_rng(13)
        xs = Sample(x=rng.standard_normal((30, 2)), y=rng.standard_normal(30))
        us = Sample(x=rng.standard_normal((30, 2)), y=rng.standard_normal(30))
        with pytest.raises(InsufficientDataError):
            run_test(xs, us, TestConfig(seed=0))  # only 10 cross-fit points survive

    def test_score_fraction_zero_needs_oracle(self):
        rng = np.random.default_rng(14)
        xs = Sample(x=rng.standard_normal((60, 2)), y=rng.standard_normal(60))
        us = Sample(x=rng.standard_normal((60, 2)), y=rng.standard_normal(60))
        with pytest.raises(ConfigError):
            run_test(xs, us, TestConfig(seed=0, score_fraction=0.0))

    def test_oracle_run_estimates_near_half(self):
        model = GaussianShiftModel.lowdim(alternative=False)
        rng = np.random.default_rng(15)
        xs = sample_with_cutoff(model, 400, rng, shifted=False)
        us = sample_with_cutoff(model, 400, rng, shifted=True)
        cfg = TestConfig(seed=3, score_fraction=0.0,
                         nuisance=NuisanceConfig(oracle=model))
        rep = run_test(xs, us, cfg)
        assert abs(rep.theta_hat - 0.5) < 0.1
        assert rep.m == 400 and rep.n == 400

    def test_relabeling_invariance_of_estimator(self):
        # permute cross-fit points together with their tags and fold labels
        model = GaussianShiftModel.lowdim(alternative=False)
        bundle = NuisanceBundle(
            gamma=model.density_ratio, score=model.score, alpha=model.comparison_mean
        )
        rng = np.random.default_rng(16)
        m = n = 60
        xs = sample_with_cutoff(model, m, rng, shifted=False)
        us = sample_with_cutoff(model, n, rng, shifted=True)
        tags = draw_tags(m, n, rng)
        xs, us = xs.with_tags(tags.zeta_x), us.with_tags(tags.zeta_u)
        grid = make_fold_grid(m, n, 2, 2, rng)
        res = cross_fit_evaluations(xs, us, grid, lambda a, b: bundle,
                                    lambda b: debiased_kernel(b))
        perm = rng.permutation(m)
        inv = np.empty(m, dtype=int)
        inv[perm] = np.arange(m)
        grid_p = FoldGrid(
            x_folds=tuple(np.sort(inv[f]) for f in grid.x_folds),
            u_folds=grid.u_folds, m=m, n=n,
        )
        res_p = cross_fit_evaluations(xs.subset(perm), us, grid_p,
                                      lambda a, b: bundle,
                                      lambda b: debiased_kernel(b))
        assert aggregate(res_p.fold_estimates) == pytest.approx(
            aggregate(res.fold_estimates), abs=1e-12
        )
        assert variance_estimate(res_p.kernel_values) == pytest.approx(
            variance_estimate(res.kernel_values), abs=1e-12
        )
