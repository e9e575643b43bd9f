import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odehazard.models import (
    DegenerateSteadyState,
    HazardResponseModel,
    HazardResponseParams,
    LogisticModel,
    LogisticParams,
    SteadyCase,
    hazard_response_system,
    logistic_cdf,
    logistic_cumhaz,
    logistic_density,
    logistic_hazard,
    logistic_quantile,
    logistic_survival,
    make_model,
    steady_state,
    weibull_bernoulli_system,
    weibull_hazard,
)
from odehazard.ode import check_jacobian, integrate_at

pos = st.floats(0.05, 10.0)


class TestLogisticClosedForm:
    def test_known_value(self):
        # lambda=1, kappa=10, h0=1 at t=1: 10 e / (9 + e)
        p = LogisticParams(1.0, 10.0, 1.0)
        assert logistic_hazard(1.0, p) == pytest.approx(10 * math.e / (9 + math.e), rel=1e-14)
        assert logistic_hazard(1.0, p) == pytest.approx(2.319693, abs=1e-6)

    def test_constant_when_h0_equals_kappa(self):
        p = LogisticParams(0.7, 3.0, 3.0)
        t = np.linspace(0, 50, 11)
        np.testing.assert_allclose(logistic_hazard(t, p), 3.0, rtol=1e-14)
        np.testing.assert_allclose(logistic_cumhaz(t, p), 3.0 * t, rtol=1e-12, atol=1e-15)

    def test_at_zero(self):
        p = LogisticParams(0.5, 0.05, 3.5)
        assert logistic_cumhaz(0.0, p) == 0.0
        assert logistic_survival(0.0, p) == 1.0
        assert logistic_hazard(0.0, p) == pytest.approx(3.5)

    def test_cumhaz_is_integral_of_hazard(self):
        from scipy.integrate import quad

        p = LogisticParams(0.5, 0.05, 3.5)
        for t in (0.1, 1.0, 7.5, 30.0):
            ref = quad(lambda s: float(logistic_hazard(s, p)), 0, t, epsabs=1e-13, epsrel=1e-12)[0]
            assert logistic_cumhaz(t, p) == pytest.approx(ref, rel=1e-9)

    def test_large_time_no_overflow(self):
        p = LogisticParams(10.0, 0.05, 8.0)
        H = logistic_cumhaz(np.array([1e3, 1e5]), p)
        assert np.all(np.isfinite(H))
        assert logistic_hazard(1e5, p) == pytest.approx(0.05)

    def test_density_and_cdf(self):
        p = LogisticParams(1.2, 0.4, 2.0)
        t = np.linspace(0, 5, 7)
        np.testing.assert_allclose(logistic_cdf(t, p) + logistic_survival(t, p), 1.0)
        np.testing.assert_allclose(logistic_density(t, p), logistic_hazard(t, p) * logistic_survival(t, p))

    @settings(max_examples=60, deadline=None)
    @given(pos, pos, pos, st.floats(0.0, 0.999))
    def test_quantile_inverts_cdf(self, lam, kappa, h0, u):
        p = LogisticParams(lam, kappa, h0)
        t = logistic_quantile(u, p)
        assert t >= 0
        assert logistic_cdf(t, p) == pytest.approx(u, abs=1e-9)

    def test_quantile_domain(self):
        p = LogisticParams(1, 1, 1)
        assert logistic_quantile(0.0, p) == 0.0
        for u in (1.0, -0.1, float("nan")):
            with pytest.raises(ValueError):
                logistic_quantile(u, p)

    @pytest.mark.parametrize("args", [(0, 1, 1), (1, -1, 1), (1, 1, float("inf"))])
    def test_invalid_params(self, args):
        with pytest.raises(ValueError):
            LogisticParams(*args)


class TestHazardResponse:
    def test_alpha_zero_decouples_to_logistic(self):
        p = HazardResponseParams(1.1, 0.3, 0.0, 2.0, h0=0.02, q0=1e-3)
        t = np.linspace(0, 15, 31)
        st_ = integrate_at(hazard_response_system(p), t).natural()
        lp = LogisticParams(1.1, 0.3, 0.02)
        np.testing.assert_allclose(st_[:, 0], logistic_hazard(t, lp), rtol=1e-6)
        np.testing.assert_allclose(st_[1:, 2], logistic_cumhaz(t[1:], lp), rtol=1e-6)

    def test_log_and_natural_scale_agree(self):
        p = HazardResponseParams(1.8, 0.1, 6.0, 4.8)
        t = np.linspace(0, 30, 61)
        a = integrate_at(hazard_response_system(p, log_scale=True), t).natural()
        b = integrate_at(hazard_response_system(p, log_scale=False), t, rtol=1e-10, atol=1e-14).natural()
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-10)

    @pytest.mark.parametrize("log_scale", [True, False])
    def test_jacobian(self, log_scale):
        p = HazardResponseParams(1.8, 0.1, 6.0, 4.8)
        sys = hazard_response_system(p, log_scale)
        rng = np.random.default_rng(3)
        for _ in range(5):
            y = rng.uniform(-3, 0, 3) if log_scale else rng.uniform(0, 0.2, 3)
            assert check_jacobian(sys, 0.0, y) < 1e-6

    def test_model_curves_fast_path_matches_system(self):
        m = HazardResponseModel()
        theta = m.theta_from({"lambda": 1.8, "kappa": 0.1, "alpha": 6, "beta": 4.8})
        t = np.linspace(0, 20, 21)
        cur = m.curves(theta, t)
        ref = integrate_at(m.system(theta), t).natural()
        np.testing.assert_allclose(cur["h"], ref[:, 0], rtol=1e-12)
        np.testing.assert_allclose(cur["H"], ref[:, 2], rtol=1e-12, atol=1e-15)

    def test_fixed_initial_conditions(self):
        m = HazardResponseModel(h0=0.01, q0=1e-6)
        assert m.free_names == ("lambda", "kappa", "alpha", "beta")
        np.testing.assert_allclose(m.expand([1, 2, 3, 4]), [1, 2, 3, 4, 0.01, 1e-6])
        assert HazardResponseModel(free_initial=True).free_names[-2:] == ("h0", "q0")


class TestSteadyState:
    def test_scenario2(self):
        ss = steady_state(HazardResponseParams(1.8, 0.1, 6.0, 4.8))
        D = 1 - (0.6**2) / (1.8 * 4.8)
        assert ss.D == pytest.approx(D, abs=1e-15)
        assert ss.h_star == pytest.approx(0.1 * (1 - 0.6 / 1.8) / D, abs=1e-15)
        assert ss.h_star == pytest.approx(0.0695652, abs=1e-7)
        assert ss.case is SteadyCase.COEXISTENCE and ss.is_equilibrium

    def test_hazard_wins(self):
        # 1 - alpha kappa / beta = -1: the response cannot invade
        ss = steady_state(HazardResponseParams(1.0, 1.0, 2.0, 1.0))
        assert ss.case is SteadyCase.HAZARD_WINS and not ss.is_equilibrium
        ss = steady_state(HazardResponseParams(3.0, 1.0, 2.0, 1.0))
        assert ss.case is SteadyCase.HAZARD_WINS

    def test_response_wins(self):
        ss = steady_state(HazardResponseParams(1.0, 1.0, 2.0, 3.0))
        assert ss.case is SteadyCase.RESPONSE_WINS and not ss.is_equilibrium
        y = integrate_at(hazard_response_system(HazardResponseParams(1.0, 1.0, 2.0, 3.0)), [300.0]).natural()[-1]
        assert y[0] < 1e-6

    def test_hazard_wins_dynamics(self):
        p = HazardResponseParams(3.0, 1.0, 2.0, 1.0, h0=0.01, q0=0.01)
        y = integrate_at(hazard_response_system(p), [300.0]).natural()[-1]
        assert y[0] == pytest.approx(1.0, abs=1e-6) and y[1] < 1e-6

    def test_no_competition(self):
        ss = steady_state(HazardResponseParams(1.3, 0.4, 0.0, 2.0))
        assert ss.D == 1.0 and ss.h_star == pytest.approx(0.4) and ss.q_star == pytest.approx(0.4)
        assert ss.is_equilibrium

    def test_degenerate(self):
        # (alpha kappa)^2 = lambda beta
        with pytest.raises(DegenerateSteadyState):
            steady_state(HazardResponseParams(2.0, 1.0, 2.0, 2.0))

    def test_trajectory_converges(self):
        p = HazardResponseParams(1.8, 0.1, 6.0, 4.8)
        ss = steady_state(p)
        y = integrate_at(hazard_response_system(p), [200.0]).natural()[-1]
        assert abs(y[0] - ss.h_star) < 1e-4 and abs(y[1] - ss.q_star) < 1e-4


class TestWeibull:
    @pytest.mark.parametrize("kw", [0.5, 2.0])
    def test_matches_closed_form(self, kw):
        sys = weibull_bernoulli_system(kw, 1.5, 0.05)
        t = np.linspace(0.05, 3, 40)
        h = integrate_at(sys, t, rtol=1e-10, atol=1e-14).states[:, 0]
        np.testing.assert_allclose(h, weibull_hazard(t, kw, 1.5), rtol=1e-6)

    def test_needs_positive_start(self):
        with pytest.raises(ValueError):
            weibull_bernoulli_system(2.0, 1.0, 0.0)


def test_make_model():
    assert isinstance(make_model("logistic"), LogisticModel)
    assert isinstance(make_model("hazard_response"), HazardResponseModel)
    with pytest.raises(ValueError):
        make_model("gompertz")
    with pytest.raises(ValueError):
        LogisticModel(fixed={"alpha": 1.0})
