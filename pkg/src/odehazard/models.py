"""Hazard models defined through autonomous ODE systems.

Two families are provided:

* logistic growth, ``h' = lam*h*(1 - h/kappa)``, which has closed forms for
  the hazard, cumulative hazard and quantile function;
* hazard-response, a competitive Lotka-Volterra pair coupling the hazard
  ``h`` with a hidden response ``q`` (shared capacity ``kappa``, shared
  competition coefficient ``alpha``), solved numerically.

A Weibull hazard written as a Bernoulli ODE is included for solver
validation only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional

import numba
import numpy as np

from .ode import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    IntegrationError,
    OdeSystem,
    integrate_at,
    solve_kernel,
)

DEGENERATE_D = 1e-12


def _check_positive(**values):
    for name, v in values.items():
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class LogisticParams:
    lam: float
    kappa: float
    h0: float

    def __post_init__(self):
        _check_positive(lam=self.lam, kappa=self.kappa, h0=self.h0)


@dataclass(frozen=True)
class HazardResponseParams:
    lam: float
    kappa: float
    alpha: float
    beta: float
    h0: float = 1e-2
    q0: float = 1e-6
    h0_fixed: bool = True
    q0_fixed: bool = True

    def __post_init__(self):
        _check_positive(lam=self.lam, kappa=self.kappa, beta=self.beta, h0=self.h0, q0=self.q0)
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be non-negative and finite, got {self.alpha!r}")


# -- logistic closed forms ---------------------------------------------------


@numba.vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def _logistic_h(t, lam, kappa, h0):
    return kappa * h0 / (h0 + (kappa - h0) * math.exp(-lam * t))


@numba.vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def _logistic_H(t, lam, kappa, h0):
    x = lam * t
    r = h0 / kappa
    if x <= 30.0:
        v = math.log1p(r * math.expm1(x))
    else:
        v = x + math.log(r + (1.0 - r) * math.exp(-x))
    return (kappa / lam) * v


@numba.njit(cache=True)
def _logistic_loglik(times, events, counts, lam, kappa, h0):
    # log h = log(kappa h0) - L and lam H / kappa = x + L - log kappa share
    # L = log(h0 + (kappa - h0) e^{-x}); small x uses log1p to avoid cancellation
    total = 0.0
    log_kh0 = math.log(kappa * h0)
    log_k = math.log(kappa)
    r = h0 / kappa
    for i in range(times.shape[0]):
        x = lam * times[i]
        L = math.log(h0 + (kappa - h0) * math.exp(-x))
        if events[i] > 0:
            total += events[i] * (log_kh0 - L)
        if x > 1.0:
            v = x + L - log_k
        else:
            v = math.log1p(r * math.expm1(x))
        total -= counts[i] * (kappa / lam) * v
    return total


def logistic_hazard(t, p: LogisticParams):
    """Logistic hazard, written as ``kappa*h0 / (h0 + (kappa - h0) e^{-lam t})``.

    Dividing through by ``e^{lam t}`` keeps every term bounded for any t >= 0.
    """
    return _logistic_h(np.asarray(t, dtype=float), p.lam, p.kappa, p.h0)


def logistic_cumhaz(t, p: LogisticParams):
    """``(kappa/lam) log(1 + (h0/kappa)(e^{lam t} - 1))``, overflow-free for large ``lam t``."""
    return _logistic_H(np.asarray(t, dtype=float), p.lam, p.kappa, p.h0)


def logistic_survival(t, p: LogisticParams):
    return np.exp(-logistic_cumhaz(t, p))


def logistic_cdf(t, p: LogisticParams):
    return -np.expm1(-logistic_cumhaz(t, p))


def logistic_density(t, p: LogisticParams):
    return logistic_hazard(t, p) * logistic_survival(t, p)


def logistic_quantile(u, p: LogisticParams):
    """Time ``t`` with ``F(t) = u``; ``u`` must lie in ``[0, 1)``."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)) or np.any(np.isnan(u)):
        raise ValueError("quantile levels must lie in [0, 1)")
    z = -(p.lam / p.kappa) * np.log1p(-u)
    c = p.kappa / p.h0
    small = z <= 30.0
    zs = np.where(small, z, 0.0)
    zl = np.where(small, 30.0, z)
    log_term = np.where(
        small,
        np.log1p(c * np.expm1(zs)),
        np.log(c) + zl + np.log1p((1.0 / c - 1.0) * np.exp(-zl)),
    )
    return log_term / p.lam


# -- compiled right-hand sides -----------------------------------------------


@numba.njit(cache=True)
def _logistic_kernel(t, y, p):
    lam, kappa = p[0], p[1]
    out = np.empty(2)
    out[0] = lam * y[0] * (1.0 - y[0] / kappa)
    out[1] = y[0]
    return out


@numba.njit(cache=True)
def _hr_kernel(t, y, p):
    lam, kappa, alpha, beta = p[0], p[1], p[2], p[3]
    h, q = y[0], y[1]
    out = np.empty(3)
    out[0] = lam * h * (1.0 - h / kappa) - alpha * q * h
    out[1] = beta * q * (1.0 - q / kappa) - alpha * q * h
    out[2] = h
    return out


@numba.njit(cache=True)
def _hr_log_kernel(t, y, p):
    lam, kappa, alpha, beta = p[0], p[1], p[2], p[3]
    h = math.exp(y[0])
    q = math.exp(y[1])
    out = np.empty(3)
    out[0] = lam * (1.0 - h / kappa) - alpha * q
    out[1] = beta * (1.0 - q / kappa) - alpha * h
    out[2] = h
    return out


@numba.njit(cache=True)
def _weibull_kernel(t, y, p):
    kw, bw = p[0], p[1]
    a = (kw - 1.0) / t - bw * kw * t ** (kw - 1.0)
    out = np.empty(1)
    out[0] = a * y[0] + y[0] * y[0]
    return out


def _py(kernel, params):
    # pure-Python evaluation of a kernel for rhs/jacobian consumers
    f = kernel.py_func
    return lambda t, y: f(t, np.asarray(y, dtype=float), params)


# -- systems -----------------------------------------------------------------


def logistic_ode_system(p: LogisticParams) -> OdeSystem:
    lam, kappa = p.lam, p.kappa
    params = np.array([lam, kappa])

    def jac(t, y):
        return np.array([[lam * (1.0 - 2.0 * y[0] / kappa), 0.0], [1.0, 0.0]])

    return OdeSystem(
        dim=2,
        rhs=_py(_logistic_kernel, params),
        y0=np.array([p.h0, 0.0]),
        jacobian=jac,
        kernel=_logistic_kernel,
        kernel_params=params,
        name="logistic",
    )


def hazard_response_system(p: HazardResponseParams, log_scale: bool = True) -> OdeSystem:
    """State ``(h, q, H)``, or ``(log h, log q, H)`` when ``log_scale``."""
    lam, kappa, alpha, beta = p.lam, p.kappa, p.alpha, p.beta
    params = np.array([lam, kappa, alpha, beta])
    if log_scale:

        def jac(t, y):
            h, q = np.exp(y[0]), np.exp(y[1])
            return np.array(
                [
                    [-lam / kappa * h, -alpha * q, 0.0],
                    [-alpha * h, -beta / kappa * q, 0.0],
                    [h, 0.0, 0.0],
                ]
            )

        return OdeSystem(
            dim=3,
            rhs=_py(_hr_log_kernel, params),
            y0=np.array([np.log(p.h0), np.log(p.q0), 0.0]),
            jacobian=jac,
            log_components=(0, 1),
            kernel=_hr_log_kernel,
            kernel_params=params,
            name="hazard-response-log",
        )

    def jac(t, y):
        h, q = y[0], y[1]
        return np.array(
            [
                [lam - 2.0 * lam * h / kappa - alpha * q, -alpha * h, 0.0],
                [-alpha * q, beta - 2.0 * beta * q / kappa - alpha * h, 0.0],
                [1.0, 0.0, 0.0],
            ]
        )

    return OdeSystem(
        dim=3,
        rhs=_py(_hr_kernel, params),
        y0=np.array([p.h0, p.q0, 0.0]),
        jacobian=jac,
        kernel=_hr_kernel,
        kernel_params=params,
        name="hazard-response",
    )


def weibull_hazard(t, kappa_w: float, beta_w: float):
    t = np.asarray(t, dtype=float)
    return beta_w * kappa_w * t ** (kappa_w - 1.0)


def weibull_bernoulli_system(kappa_w: float, beta_w: float, t_start: float) -> OdeSystem:
    """Scalar Bernoulli ODE ``h' = a(t) h + h^2`` whose solution is the Weibull hazard.

    Starts at ``t_start > 0`` from the exact hazard value, since ``t = 0`` is
    either a stationary point (shape > 1) or a pole (shape < 1).
    """
    _check_positive(kappa_w=kappa_w, beta_w=beta_w)
    if not t_start > 0:
        raise ValueError("t_start must be positive")
    params = np.array([kappa_w, beta_w])

    def jac(t, y):
        a = (kappa_w - 1.0) / t - beta_w * kappa_w * t ** (kappa_w - 1.0)
        return np.array([[a + 2.0 * y[0]]])

    return OdeSystem(
        dim=1,
        rhs=_py(_weibull_kernel, params),
        y0=np.array([float(weibull_hazard(t_start, kappa_w, beta_w))]),
        jacobian=jac,
        t0=float(t_start),
        kernel=_weibull_kernel,
        kernel_params=params,
        name="weibull-bernoulli",
    )


# -- steady states -----------------------------------------------------------


class SteadyCase(str, Enum):
    ORIGIN = "origin"
    HAZARD_WINS = "hazard_wins"
    RESPONSE_WINS = "response_wins"
    COEXISTENCE = "coexistence"


class DegenerateSteadyState(ValueError):
    pass


@dataclass(frozen=True)
class SteadyState:
    case: SteadyCase
    h_star: float
    q_star: float
    D: float
    is_equilibrium: bool

    def as_dict(self) -> dict:
        return {
            "case": self.case.value,
            "h_star": self.h_star,
            "q_star": self.q_star,
            "D": self.D,
            "is_equilibrium": self.is_equilibrium,
        }


def steady_state_values(lam, kappa, alpha, beta):
    """Vectorised ``(D, h*, q*)``; no degeneracy check."""
    lam, kappa, alpha, beta = (np.asarray(v, dtype=float) for v in (lam, kappa, alpha, beta))
    ak = alpha * kappa
    D = 1.0 - ak * ak / (lam * beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_star = kappa * (1.0 - ak / lam) / D
        q_star = kappa * (1.0 - ak / beta) / D
    return D, h_star, q_star


def steady_state(p: HazardResponseParams) -> SteadyState:
    D, h_star, q_star = (float(v) for v in steady_state_values(p.lam, p.kappa, p.alpha, p.beta))
    if abs(D) < DEGENERATE_D:
        raise DegenerateSteadyState(f"|D| = {abs(D):.3g} is below {DEGENERATE_D}; no interior point")
    # invasion criteria: can q grow at (kappa, 0), can h grow at (0, kappa)?
    ak = p.alpha * p.kappa
    if 1.0 - ak / p.beta <= 0:
        case = SteadyCase.HAZARD_WINS
    elif 1.0 - ak / p.lam <= 0:
        case = SteadyCase.RESPONSE_WINS
    else:
        case = SteadyCase.COEXISTENCE
    eq = case is SteadyCase.COEXISTENCE and D > 0
    return SteadyState(case, h_star, q_star, D, eq)


# -- model wrappers used by inference, simulation and prediction ------------


class HazardModel:
    """A parametric hazard family with named parameters, some possibly fixed.

    ``theta`` vectors passed to :meth:`curves` always hold every parameter in
    ``param_names`` order on the natural scale.
    """

    name = "base"
    param_names: tuple = ()
    has_response = False

    def __init__(self, fixed: Optional[Mapping[str, float]] = None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(self.param_names)
        if unknown:
            raise ValueError(f"unknown fixed parameters for {self.name}: {sorted(unknown)}")
        self.fixed = fixed
        self.rtol = rtol
        self.atol = atol

    @property
    def free_names(self) -> tuple:
        return tuple(n for n in self.param_names if n not in self.fixed)

    @property
    def free_index(self) -> np.ndarray:
        return np.array([i for i, n in enumerate(self.param_names) if n not in self.fixed], dtype=int)

    def expand(self, free_values) -> np.ndarray:
        """Full natural-scale parameter vector from the free values."""
        free_values = np.asarray(free_values, dtype=float)
        theta = np.empty(len(self.param_names))
        k = 0
        for i, n in enumerate(self.param_names):
            if n in self.fixed:
                theta[i] = self.fixed[n]
            else:
                theta[i] = free_values[k]
                k += 1
        return theta

    def theta_from(self, values: Mapping[str, float]) -> np.ndarray:
        merged = {**values, **self.fixed}
        return np.array([float(merged[n]) for n in self.param_names])

    def valid(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)) and np.all(np.asarray(theta) > 0))

    def curves(self, theta, times) -> dict:
        """Hazard ``h``, cumulative hazard ``H`` (and ``q`` if any) at sorted times."""
        raise NotImplementedError

    def loglik_sorted(self, theta, times, events, counts) -> float:
        """Log-likelihood from sorted unique times with event and row counts."""
        cur = self.curves(theta, times)
        h, H = cur["h"], cur["H"]
        has_event = events > 0
        if np.any(~(h[has_event] > 0)):
            return -math.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            return float(np.dot(events[has_event], np.log(h[has_event])) - np.dot(counts, H))

    def system(self, theta) -> OdeSystem:
        raise NotImplementedError

    def config(self) -> dict:
        return {"model": self.name, "fixed": dict(self.fixed), "rtol": self.rtol, "atol": self.atol}


class LogisticModel(HazardModel):
    name = "logistic"
    param_names = ("lambda", "kappa", "h0")

    def __init__(self, fixed=None, use_ode: bool = False, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
        super().__init__(fixed, rtol, atol)
        self.use_ode = use_ode

    def params(self, theta) -> LogisticParams:
        return LogisticParams(*(float(v) for v in theta))

    def loglik_sorted(self, theta, times, events, counts) -> float:
        if self.use_ode:
            return super().loglik_sorted(theta, times, events, counts)
        return _logistic_loglik(times, events, counts, float(theta[0]), float(theta[1]), float(theta[2]))

    def valid(self, theta) -> bool:
        return bool(theta[0] > 0 and theta[1] > 0 and theta[2] > 0) and bool(np.all(np.isfinite(theta)))

    def system(self, theta) -> OdeSystem:
        return logistic_ode_system(self.params(theta))

    def curves(self, theta, times) -> dict:
        p = self.params(theta)
        times = np.asarray(times, dtype=float)
        if self.use_ode:
            traj = integrate_at(self.system(theta), times, rtol=self.rtol, atol=self.atol)
            return {"h": traj.states[:, 0], "H": traj.states[:, 1]}
        return {
            "h": _logistic_h(times, p.lam, p.kappa, p.h0),
            "H": _logistic_H(times, p.lam, p.kappa, p.h0),
        }


class HazardResponseModel(HazardModel):
    name = "hazard-response"
    param_names = ("lambda", "kappa", "alpha", "beta", "h0", "q0")
    has_response = True

    def __init__(
        self,
        h0: float = 1e-2,
        q0: float = 1e-6,
        free_initial: bool = False,
        fixed=None,
        log_scale: bool = True,
        method: str = "auto",
        rtol=DEFAULT_RTOL,
        atol=DEFAULT_ATOL,
    ):
        merged = {} if free_initial else {"h0": h0, "q0": q0}
        merged.update(fixed or {})
        super().__init__(merged, rtol, atol)
        self.log_scale = log_scale
        self.method = method
        self._init_guess = {"h0": h0, "q0": q0}

    def valid(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return False
        # alpha may be exactly zero
        return bool(np.all(np.delete(theta, 2) > 0) and theta[2] >= 0)

    def params(self, theta) -> HazardResponseParams:
        lam, kappa, alpha, beta, h0, q0 = (float(v) for v in theta)
        return HazardResponseParams(
            lam, kappa, alpha, beta, h0, q0, "h0" in self.fixed, "q0" in self.fixed
        )

    def system(self, theta) -> OdeSystem:
        return hazard_response_system(self.params(theta), log_scale=self.log_scale)

    def curves(self, theta, times) -> dict:
        theta = np.asarray(theta, dtype=float)
        times = np.ascontiguousarray(times, dtype=float)
        states = None
        if self.method != "bdf":
            params = theta[:4].copy()
            if self.log_scale:
                kernel = _hr_log_kernel
                y0 = np.array([math.log(theta[4]), math.log(theta[5]), 0.0])
            else:
                kernel = _hr_kernel
                y0 = np.array([theta[4], theta[5], 0.0])
            try:
                states = solve_kernel(kernel, params, y0, times, self.rtol, self.atol)
            except IntegrationError:
                if self.method != "auto":
                    raise
        if states is None:
            states = integrate_at(
                self.system(theta), times, rtol=self.rtol, atol=self.atol, method="bdf"
            ).states
        if self.log_scale:
            return {"h": np.exp(states[:, 0]), "q": np.exp(states[:, 1]), "H": states[:, 2]}
        return {"h": states[:, 0], "q": states[:, 1], "H": states[:, 2]}

    def config(self) -> dict:
        cfg = super().config()
        cfg.update(log_scale=self.log_scale, method=self.method)
        return cfg


MODEL_NAMES = ("logistic", "hazard-response")


def make_model(name: str, **kwargs) -> HazardModel:
    name = name.lower().replace("_", "-")
    if name == "logistic":
        return LogisticModel(**kwargs)
    if name in ("hazard-response", "hr"):
        return HazardResponseModel(**kwargs)
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
