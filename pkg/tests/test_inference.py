import math

import numpy as np
import pytest
from scipy import stats

from odehazard.data import SurvivalDataset
from odehazard.inference import (
    Chain,
    InferenceError,
    McmcConfig,
    PriorSpec,
    adaptive_mwg,
    autocorrelation,
    effective_sample_size,
    fit_mle,
    gamma_logpdf,
    iat,
    log_likelihood,
    log_prior,
    run_mcmc,
)
from odehazard.models import HazardResponseModel, LogisticModel, LogisticParams
from odehazard.simulation import simulate_logistic


@pytest.fixture(scope="module")
def logistic_data():
    p = LogisticParams(0.5, 0.05, 3.5)
    t = simulate_logistic(800, p, seed=11)
    c = 20.0
    return SurvivalDataset(np.minimum(t, c), (t <= c).astype(int))


class TestLikelihood:
    def test_constant_hazard_closed_form(self):
        # h0 = kappa gives an exponential model: d log(r) - r sum(t)
        ds = SurvivalDataset([0.5, 1.0, 2.0, 2.0, 3.0], [1, 0, 1, 1, 0])
        m = LogisticModel()
        r = 0.7
        ll = log_likelihood(m, np.array([1.3, r, r]), ds)
        assert ll == pytest.approx(3 * math.log(r) - r * 8.5, rel=1e-12)

    def test_ode_and_analytic_paths_agree(self, logistic_data):
        theta = np.array([0.6, 0.06, 3.0])
        a = log_likelihood(LogisticModel(), theta, logistic_data)
        b = log_likelihood(LogisticModel(use_ode=True), theta, logistic_data)
        assert a == pytest.approx(b, rel=1e-8)

    def test_ties_and_order_invariant(self, logistic_data):
        theta = np.array([0.6, 0.06, 3.0])
        perm = np.random.default_rng(0).permutation(logistic_data.n)
        shuffled = SurvivalDataset(logistic_data.times[perm], logistic_data.status[perm])
        assert log_likelihood(LogisticModel(), theta, shuffled) == pytest.approx(
            log_likelihood(LogisticModel(), theta, logistic_data), rel=1e-13
        )

    def test_solver_failure_is_minus_inf(self):
        ds = SurvivalDataset([1.0, 100.0], [1, 1])
        m = HazardResponseModel(rtol=1e-8)
        m.method = "dopri5"
        # absurd rates exhaust the step budget
        ll = log_likelihood(m, np.array([1e9, 1e-9, 1e9, 1e9, 0.01, 1e-6]), ds)
        assert ll == -math.inf or math.isfinite(ll)

    def test_hazard_response_finite(self):
        ds = SurvivalDataset([1.0, 2.0, 5.0], [1, 0, 1])
        assert math.isfinite(log_likelihood(HazardResponseModel(), np.array([1.8, 0.1, 6, 4.8, 0.01, 1e-6]), ds))


class TestPrior:
    def test_gamma_matches_scipy(self):
        x = np.array([0.1, 1.0, 4.0, 20.0])
        np.testing.assert_allclose(gamma_logpdf(x, 2.0, 2.0), stats.gamma(a=2, scale=2).logpdf(x), rtol=1e-12)
        assert gamma_logpdf(-1.0, 2, 2) == -np.inf

    def test_fixed_parameters_excluded(self):
        m = HazardResponseModel()
        theta = np.array([1.0, 1.0, 1.0, 1.0, 0.01, 1e-6])
        assert log_prior(m, theta) == pytest.approx(4 * stats.gamma(a=2, scale=2).logpdf(1.0))

    def test_overrides_and_validation(self):
        prior = PriorSpec(overrides={"kappa": (1.0, 0.1)})
        assert prior.mean("kappa") == pytest.approx(0.1)
        assert prior.variance("lambda") == 8.0
        with pytest.raises(ValueError):
            PriorSpec(shape=0)


class TestMle:
    def test_exponential_mle_closed_form(self):
        rng = np.random.default_rng(4)
        t = rng.exponential(1 / 0.8, 500)
        ds = SurvivalDataset(np.minimum(t, 2.0), (t <= 2.0).astype(int))
        m = LogisticModel(fixed={"lambda": 1.0})
        # kappa = h0 is not enforced, but the MLE of a constant hazard is d / sum(t)
        res = fit_mle(m, ds)
        rate = ds.events / ds.times.sum()
        h = m.curves(res.theta, np.array([0.0, 1.0, 2.0]))["h"]
        np.testing.assert_allclose(h, rate, rtol=0.05)
        assert res.log_likelihood >= log_likelihood(m, np.array([1.0, rate, rate]), ds) - 1e-6

    def test_recovers_logistic(self, logistic_data):
        res = fit_mle(LogisticModel(), logistic_data)
        assert res.converged
        assert res.estimate["kappa"] == pytest.approx(0.05, rel=0.4)
        assert res.estimate["h0"] == pytest.approx(3.5, rel=0.3)

    def test_all_censored_rejected(self):
        with pytest.raises(InferenceError, match="censored"):
            fit_mle(LogisticModel(), SurvivalDataset([1.0, 2.0], [0, 0]))


class TestSampler:
    def test_standard_normal(self):
        rng = np.random.default_rng(0)
        out = adaptive_mwg(lambda x: -0.5 * float(x @ x), np.zeros(2), 40_000, rng, burn_in=5_000, thinning=5)
        assert abs(out.samples.mean()) < 0.08
        assert out.samples.var(axis=0) == pytest.approx([1, 1], rel=0.1)
        assert np.all(np.abs(out.acceptance - 0.44) < 0.08)

    def test_deterministic_given_seed(self, logistic_data):
        cfg = McmcConfig(iterations=3000, burn_in=1000, thinning=10, seed=5)
        a = run_mcmc(LogisticModel(), logistic_data, config=cfg)
        b = run_mcmc(LogisticModel(), logistic_data, config=cfg)
        np.testing.assert_array_equal(a.draws, b.draws)
        assert len(a) == 200 and a.seed == 5

    def test_chain_csv_roundtrip(self, tmp_path, logistic_data):
        cfg = McmcConfig(iterations=2000, burn_in=1000, thinning=10, seed=1)
        ch = run_mcmc(HazardResponseModel(), SurvivalDataset([0.5, 1, 2, 4, 8], [1, 1, 0, 1, 1]), config=cfg)
        ch.to_csv(tmp_path / "c.csv")
        back = Chain.from_csv(tmp_path / "c.csv", HazardResponseModel())
        np.testing.assert_array_equal(back.draws, ch.draws)
        np.testing.assert_array_equal(back.log_posterior, ch.log_posterior)
        assert np.all(ch.draws[:, 4] == 0.01)

    def test_invalid_config(self, logistic_data):
        with pytest.raises(ValueError):
            run_mcmc(LogisticModel(), logistic_data, config=McmcConfig(iterations=10, burn_in=10))


class TestDiagnostics:
    def test_ar1_iat(self):
        # AR(1) with phi has IAT (1 + phi) / (1 - phi)
        rng = np.random.default_rng(2)
        phi, n = 0.8, 200_000
        e = rng.standard_normal(n)
        x = np.empty(n)
        x[0] = e[0]
        for i in range(1, n):
            x[i] = phi * x[i - 1] + e[i]
        assert iat(x) == pytest.approx(9.0, rel=0.1)
        assert effective_sample_size(x) == pytest.approx(n / 9.0, rel=0.1)

    def test_white_noise(self):
        x = np.random.default_rng(1).standard_normal(50_000)
        assert iat(x) == pytest.approx(1.0, abs=0.1)
        assert autocorrelation(x)[0] == 1.0

    def test_errors(self):
        with pytest.raises(InferenceError):
            iat(np.ones(500))
        with pytest.raises(InferenceError):
            iat(np.arange(10.0))
