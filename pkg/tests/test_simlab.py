import math

import numpy as np
import pytest
from scipy.stats import norm

from udebias.errors import ConfigError
from udebias.simlab import (
    GaussianShiftModel,
    SimConfig,
    apply_ratio_cutoff,
    gen_highdim,
    gen_lowdim,
    run_trials,
    sample_with_cutoff,
    write_summary_csv,
    write_trials_csv,
)
from udebias.ustat import Sample


class TestGenerators:
    def test_null_response_mean(self):
        xs, us = gen_lowdim(60_000, 60_000, alternative=False, seed=0)
        beta = np.ones(5)
        resid = us.y - us.x @ beta
        assert abs(resid.mean()) <= 3 / math.sqrt(len(resid))

    def test_alternative_response_shift(self):
        xs, us = gen_lowdim(60_000, 60_000, alternative=True, seed=1)
        resid = us.y - us.x @ np.ones(5)
        assert resid.mean() == pytest.approx(0.5, abs=3 / math.sqrt(len(resid)))

    def test_ratio_at_the_shift_point(self):
        model = GaussianShiftModel.lowdim()
        mu = model.shift_mu
        assert model.density_ratio(mu[None, :])[0] == pytest.approx(math.exp(2.0), rel=1e-12)

    def test_highdim_sparse_dependence(self):
        xs, us = gen_highdim(40_000, 40_000, alternative=False, dim=50, seed=2)
        # responses are uncorrelated with the zero-coefficient coordinates
        for j in (7, 20, 49):
            c = np.corrcoef(us.y, us.x[:, j])[0, 1]
            assert abs(c) < 0.02
        assert np.corrcoef(us.y, us.x[:, 0])[0, 1] > 0.3

    def test_dim5_reduces_to_lowdim(self):
        a = gen_lowdim(100, 80, alternative=False, seed=3)
        b = gen_highdim(100, 80, alternative=False, dim=5, seed=3)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.x, s2.x)
            assert np.array_equal(s1.y, s2.y)
        # under the alternative only the response intercept differs (0.5 vs 0.25)
        a = gen_lowdim(100, 80, alternative=True, seed=4)
        b = gen_highdim(100, 80, alternative=True, dim=5, seed=4)
        assert np.array_equal(a[1].x, b[1].x)
        assert np.allclose(a[1].y - b[1].y, 0.25, atol=1e-12)

    def test_highdim_alt_shift(self):
        _, us = gen_highdim(60_000, 60_000, alternative=True, dim=20, seed=5)
        model = GaussianShiftModel.highdim(alternative=True, dim=20)
        resid = us.y - us.x @ model.beta
        assert resid.mean() == pytest.approx(0.25, abs=3 / math.sqrt(len(resid)))

    def test_small_dim_rejected(self):
        with pytest.raises(ConfigError):
            gen_highdim(10, 10, alternative=False, dim=3, seed=0)
        with pytest.raises(ConfigError):
            GaussianShiftModel.highdim(dim=4)


class TestRatioCutoff:
    def test_inside_and_outside(self):
        model = GaussianShiftModel.lowdim()
        mu = model.shift_mu
        # ratio exp(t - 2) = 60 when t = 2 + ln 60; = 1 when t = 2
        x_out = (2.0 + math.log(60.0)) * mu[None, :] / 4.0
        x_in = 2.0 * mu[None, :] / 4.0
        sample = Sample(x=np.vstack([x_out, x_in]), y=np.zeros(2))
        kept = apply_ratio_cutoff(sample, model.density_ratio)
        assert len(kept) == 1
        assert np.allclose(kept.x[0], x_in[0])

    def test_retained_fraction_matches_gaussian_oracle(self):
        model = GaussianShiftModel.lowdim()
        xs, _ = gen_lowdim(200_000, 10, alternative=False, seed=6)
        kept = apply_ratio_cutoff(xs, model.density_ratio)
        frac = len(kept) / len(xs)
        L = math.log(50.0)
        expected = norm.cdf((2 + L) / 2.0) - norm.cdf((2 - L) / 2.0)
        assert frac == pytest.approx(expected, abs=0.01)

    def test_idempotent(self):
        model = GaussianShiftModel.lowdim()
        xs, _ = gen_lowdim(5000, 10, alternative=False, seed=7)
        once = apply_ratio_cutoff(xs, model.density_ratio)
        twice = apply_ratio_cutoff(once, model.density_ratio)
        assert np.array_equal(once.x, twice.x)

    def test_rejection_sampler_hits_target_size(self):
        model = GaussianShiftModel.lowdim()
        rng = np.random.default_rng(8)
        s = sample_with_cutoff(model, 777, rng, shifted=True)
        assert len(s) == 777
        r = model.density_ratio(s.x)
        assert np.all((r >= 1 / 50) & (r <= 50))


class TestSimConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            SimConfig(setting="meddim", n_crossfit=10)
        with pytest.raises(ConfigError):
            SimConfig(setting="lowdim", n_crossfit=10, trials=0)
        with pytest.raises(ConfigError):
            SimConfig(setting="lowdim", n_crossfit=10, dim_override=7)
        with pytest.raises(ConfigError):
            SimConfig(setting="highdim", n_crossfit=10, dim_override=4)
        assert SimConfig(setting="highdim", n_crossfit=10, dim_override=60).dim == 60
        assert SimConfig(setting="lowdim", n_crossfit=10).dim == 5

    def test_setting_defaults(self):
        low = SimConfig(setting="lowdim", n_crossfit=10).nuisance_config()
        high = SimConfig(setting="highdim", n_crossfit=10, dim_override=20).nuisance_config()
        assert low.classifier == "logistic" and low.regressor == "ols"
        assert high.classifier == "lasso-logistic" and high.regressor == "lasso"
        assert high.score_classifier == "stability+logistic"


class TestRunTrials:
    def test_deterministic_across_thread_counts(self):
        cfg = SimConfig(setting="lowdim", n_crossfit=120, trials=6, seed=11, method="both")
        s1 = run_trials(cfg, threads=1)
        s2 = run_trials(cfg, threads=2)
        for mth in ("debiased", "plugin"):
            t1 = [o.theta_hat for o in s1.methods[mth].outcomes]
            t2 = [o.theta_hat for o in s2.methods[mth].outcomes]
            assert t1 == t2

    def test_oracle_null_rejection_rate(self):
        cfg = SimConfig(setting="lowdim", n_crossfit=200, trials=40, seed=12,
                        oracle_nuisances=True)
        s = run_trials(cfg, threads=2)
        assert len(s.failures) == 0
        assert s.methods["debiased"].rejection_rate <= 0.15

    def test_failures_recorded_not_fatal(self):
        cfg = SimConfig(setting="lowdim", n_crossfit=15, trials=3, seed=13)
        s = run_trials(cfg, threads=1)
        assert len(s.failures) == 3
        assert math.isnan(s.methods["debiased"].mean_bias)

    def test_power_not_decreasing_in_sample_size(self):
        rates = []
        for n in (150, 500):
            cfg = SimConfig(setting="lowdim", n_crossfit=n, alternative=True,
                            trials=30, seed=14)
            rates.append(run_trials(cfg, threads=2).methods["debiased"].rejection_rate)
        # one-sided binomial comparison at the 1% level: no significant drop
        p_pool = 0.5 * (rates[0] + rates[1])
        se = math.sqrt(max(p_pool * (1 - p_pool), 1e-9) * 2 / 30)
        assert rates[1] - rates[0] >= -2.326 * se

    def test_csv_emission_deterministic(self, tmp_path):
        cfg = SimConfig(setting="lowdim", n_crossfit=120, trials=4, seed=15, method="both")
        s = run_trials(cfg, threads=2)
        f1, f2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_summary_csv(s, f1)
        write_summary_csv(run_trials(cfg, threads=1), f2)
        assert f1.read_bytes() == f2.read_bytes()
        write_trials_csv(s, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().strip().splitlines()
        assert lines[0] == "trial,method,theta_hat,t_stat,p_value,reject"
        assert len(lines) == 1 + 2 * 4
