"""Initial-value-problem integration at requested output times.

The default integrator is an adaptive Dormand-Prince 5(4) pair with Hairer's
4th-order continuous extension, so states at arbitrary sorted output times are
obtained from a single pass over accepted steps. The stepping loop is written
once and run in two modes: compiled with numba when the system supplies a
jitted kernel ``kernel(t, y, params) -> dy``, or as plain Python otherwise.

A backward-differentiation path (scipy's BDF with the analytic Jacobian) is
available for stiff regimes, and ``method="auto"`` falls back to it when the
explicit pair exhausts its step budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy.integrate import solve_ivp

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
DEFAULT_MAX_STEPS = 100_000

# status codes returned by the stepping loop
_OK = 0
_MAX_STEPS = 1
_UNDERFLOW = 2
_NONFINITE = 3


class IntegrationError(RuntimeError):
    """Raised when the integrator cannot reach the requested horizon."""

    def __init__(self, message: str, t_reached: float, status: int = _UNDERFLOW):
        super().__init__(f"{message} (last reachable time t={t_reached:.6g})")
        self.t_reached = t_reached
        self.status = status


@dataclass(frozen=True)
class OdeSystem:
    """An autonomous-or-not ODE system ``y' = rhs(t, y)`` with its initial state.

    ``log_components`` lists state indices that are integrated on the log
    scale; :meth:`Trajectory.natural` exponentiates them for output.
    ``kernel``/``kernel_params`` optionally provide a numba-compiled
    right-hand side with signature ``kernel(t, y, params) -> ndarray``.
    """

    dim: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    y0: np.ndarray
    jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    t0: float = 0.0
    log_components: tuple = ()
    kernel: object = None
    kernel_params: Optional[np.ndarray] = None
    name: str = "ode"

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float).reshape(-1)
        if y0.size != self.dim:
            raise ValueError(f"y0 has length {y0.size}, expected dim={self.dim}")
        if not np.all(np.isfinite(y0)):
            raise ValueError("initial state must be finite")
        object.__setattr__(self, "y0", y0)
        if self.kernel_params is not None:
            object.__setattr__(
                self, "kernel_params", np.ascontiguousarray(self.kernel_params, dtype=float)
            )


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    steps: int = 0
    rejected: int = 0
    method: str = "dopri5"
    log_components: tuple = field(default=())

    def natural(self) -> np.ndarray:
        """States with log-scale components mapped back to their natural scale."""
        out = self.states.copy()
        for j in self.log_components:
            out[:, j] = np.exp(out[:, j])
        return out

    def component(self, j: int) -> np.ndarray:
        col = self.states[:, j]
        return np.exp(col) if j in self.log_components else col.copy()


# Dormand-Prince 5(4) tableau
_C2, _C3, _C4, _C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
# difference between 5th and embedded 4th order weights
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71.0 / 57600.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)
# continuous extension (Hairer, Norsett & Wanner, dopri5 dense output)
_D1 = -12715105075.0 / 11282082432.0
_D3 = 87487479700.0 / 32700410799.0
_D4 = -10690763975.0 / 1880347072.0
_D5 = 701980252875.0 / 199316789632.0
_D6 = -1453857185.0 / 822651844.0
_D7 = 69997945.0 / 29380423.0


def _error_norm(err, y, ynew, rtol, atol):
    acc = 0.0
    n = y.shape[0]
    for i in range(n):
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        r = err[i] / sc
        acc += r * r
    return np.sqrt(acc / n)


def _initial_step(rhs, params, t0, y0, f0, rtol, atol, span):
    n = y0.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d0 += (y0[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = np.sqrt(d0 / n)
    d1 = np.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1, params)
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * abs(y0[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = np.sqrt(d2 / n) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, span)


def _dopri5(rhs, params, t0, y0, t_out, rtol, atol, max_steps):
    """Integrate from ``t0`` and return states at the sorted times ``t_out``.

    Returns ``(states, n_accepted, n_rejected, status, t_reached)``.
    """
    n = y0.shape[0]
    m = t_out.shape[0]
    out = np.full((m, n), np.nan)
    t_end = t_out[m - 1]
    j = 0
    while j < m and t_out[j] <= t0:
        for i in range(n):
            out[j, i] = y0[i]
        j += 1
    if j == m:
        return out, 0, 0, _OK, t0

    t = t0
    y = y0.copy()
    ys = np.empty(n)
    ynew = np.empty(n)
    err = np.empty(n)
    r2 = np.empty(n)
    r3 = np.empty(n)
    r4 = np.empty(n)
    r5 = np.empty(n)
    k1 = rhs(t, y, params)
    for i in range(n):
        if not np.isfinite(k1[i]):
            return out, 0, 0, _NONFINITE, t
    h = _initial_step(rhs, params, t0, y0, k1, rtol, atol, t_end - t0)
    accepted = 0
    rejected = 0
    last_rejected = False
    while t < t_end:
        if accepted + rejected >= max_steps:
            return out, accepted, rejected, _MAX_STEPS, t
        if h < 1e-14 * max(1.0, abs(t)):
            return out, accepted, rejected, _UNDERFLOW, t
        final = t + h >= t_end
        if final:
            h = t_end - t
        for i in range(n):
            ys[i] = y[i] + h * (_A21 * k1[i])
        k2 = rhs(t + _C2 * h, ys, params)
        for i in range(n):
            ys[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
        k3 = rhs(t + _C3 * h, ys, params)
        for i in range(n):
            ys[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
        k4 = rhs(t + _C4 * h, ys, params)
        for i in range(n):
            ys[i] = y[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i])
        k5 = rhs(t + _C5 * h, ys, params)
        for i in range(n):
            ys[i] = y[i] + h * (
                _A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i] + _A65 * k5[i]
            )
        k6 = rhs(t + h, ys, params)
        for i in range(n):
            ynew[i] = y[i] + h * (
                _B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i] + _B6 * k6[i]
            )
        k7 = rhs(t + h, ynew, params)
        finite = True
        for i in range(n):
            if not (np.isfinite(ynew[i]) and np.isfinite(k7[i])):
                finite = False
        if not finite:
            rejected += 1
            last_rejected = True
            h *= 0.25
            continue
        for i in range(n):
            err[i] = h * (
                _E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i]
            )
        en = _error_norm(err, y, ynew, rtol, atol)
        if en <= 1.0:
            t_new = t_end if final else t + h
            if j < m and t_out[j] <= t_new:
                for i in range(n):
                    r2[i] = ynew[i] - y[i]
                    r3[i] = h * k1[i] - r2[i]
                    r4[i] = r2[i] - h * k7[i] - r3[i]
                    r5[i] = h * (
                        _D1 * k1[i] + _D3 * k3[i] + _D4 * k4[i]
                        + _D5 * k5[i] + _D6 * k6[i] + _D7 * k7[i]
                    )
                while j < m and t_out[j] <= t_new:
                    if t_out[j] == t_new:
                        for i in range(n):
                            out[j, i] = ynew[i]
                    else:
                        th = (t_out[j] - t) / h
                        th1 = 1.0 - th
                        for i in range(n):
                            out[j, i] = y[i] + th * (
                                r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i]))
                            )
                    j += 1
            t = t_new
            for i in range(n):
                y[i] = ynew[i]
            k1 = k7
            accepted += 1
            if en == 0.0:
                fac = 10.0
            else:
                fac = min(10.0, max(0.2, 0.9 * en ** -0.2))
            if last_rejected:
                fac = min(fac, 1.0)
            last_rejected = False
            h *= fac
        else:
            rejected += 1
            last_rejected = True
            h *= max(0.2, 0.9 * en ** -0.2)
    return out, accepted, rejected, _OK, t


_error_norm_jit = numba.njit(cache=True)(_error_norm)


def _make_compiled():
    # the Python sources reference module-level helpers by name; compile
    # copies of them that resolve to the jitted versions
    g = dict(globals())
    g["_error_norm"] = _error_norm_jit
    init = numba.njit(cache=False)(
        type(_initial_step)(_initial_step.__code__, g, "_initial_step_jit")
    )
    g["_initial_step"] = init
    core = numba.njit(cache=False)(type(_dopri5)(_dopri5.__code__, g, "_dopri5_jit"))
    return core


_dopri5_jit = _make_compiled()
_drivers: dict = {}


def _driver(kernel):
    # binding the kernel at compile time avoids re-typing a function
    # argument on every call
    fn = _drivers.get(kernel)
    if fn is None:
        core = _dopri5_jit

        @numba.njit
        def fn(params, t0, y0, t_out, rtol, atol, max_steps):
            return core(kernel, params, t0, y0, t_out, rtol, atol, max_steps)

        _drivers[kernel] = fn
    return fn


def _python_rhs(fun):
    def wrapped(t, y, params):
        return np.asarray(fun(t, y), dtype=float)

    return wrapped


def _status_error(status: int, t_reached: float) -> IntegrationError:
    if status == _MAX_STEPS:
        return IntegrationError("step budget exhausted", t_reached, status)
    if status == _NONFINITE:
        return IntegrationError("non-finite right-hand side", t_reached, status)
    return IntegrationError("step size underflow", t_reached, status)


def _run_dopri(system: OdeSystem, times, rtol, atol, max_steps):
    if system.kernel is not None:
        params = system.kernel_params if system.kernel_params is not None else np.zeros(0)
        return _driver(system.kernel)(
            params, float(system.t0), system.y0, times, rtol, atol, max_steps
        )
    return _dopri5(
        _python_rhs(system.rhs), None, float(system.t0), system.y0, times, rtol, atol, max_steps
    )


def _run_bdf(system: OdeSystem, times, rtol, atol):
    t0 = float(system.t0)
    out = np.empty((times.size, system.dim))
    at_start = times <= t0
    out[at_start] = system.y0
    later = times[~at_start]
    if later.size == 0:
        return out, 0, 0, _OK, t0
    sol = solve_ivp(
        system.rhs,
        (t0, float(later[-1])),
        system.y0,
        method="BDF",
        t_eval=later,
        jac=system.jacobian,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        t_reached = float(sol.t[-1]) if sol.t.size else t0
        return out, 0, 0, _UNDERFLOW, t_reached
    out[~at_start] = sol.y.T
    return out, int(sol.nfev), 0, _OK, float(later[-1])


def solve_kernel(kernel, params, y0, times, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                 t0=0.0, max_steps=DEFAULT_MAX_STEPS) -> np.ndarray:
    """Fast path for a compiled kernel: states at sorted ``times`` (no validation).

    Raises :class:`IntegrationError` on failure.
    """
    states, _, _, status, t_reached = _driver(kernel)(
        params, t0, y0, times, rtol, atol, max_steps
    )
    if status != _OK:
        raise _status_error(status, t_reached)
    return states


def integrate_at(
    system: OdeSystem,
    times: Sequence[float],
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    method: str = "dopri5",
    max_steps: int = DEFAULT_MAX_STEPS,
) -> Trajectory:
    """Solve ``system`` and return its states at exactly ``times``.

    ``method`` is ``"dopri5"`` (explicit, dense output), ``"bdf"`` (implicit,
    uses ``system.jacobian``) or ``"auto"`` (dopri5, then BDF if the step
    budget runs out). Raises :class:`IntegrationError` on failure.
    """
    t = np.ascontiguousarray(times, dtype=float).reshape(-1)
    if t.size == 0:
        raise ValueError("no output times requested")
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    if np.any(np.diff(t) < 0):
        raise ValueError("output times must be sorted ascending")
    if t[0] < system.t0:
        raise ValueError(f"output times must be >= t0={system.t0}")
    if method not in ("dopri5", "bdf", "auto"):
        raise ValueError(f"unknown method {method!r}")

    used = "bdf" if method == "bdf" else "dopri5"
    if method == "bdf":
        states, steps, rej, status, t_reached = _run_bdf(system, t, rtol, atol)
    else:
        states, steps, rej, status, t_reached = _run_dopri(system, t, rtol, atol, max_steps)
        if status != _OK and method == "auto":
            used = "bdf"
            states, steps, rej, status, t_reached = _run_bdf(system, t, rtol, atol)
    if status != _OK:
        raise _status_error(status, t_reached)
    return Trajectory(t, states, steps, rej, used, tuple(system.log_components))


def integrate_grid(
    system: OdeSystem,
    t_max: float,
    step: float,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    method: str = "dopri5",
) -> Trajectory:
    """Solve on the equally spaced grid ``{t0, t0+step, ..., t_max}``."""
    if t_max <= system.t0:
        raise ValueError("t_max must exceed the initial time")
    if not 0 < step < t_max - system.t0:
        raise ValueError("step must satisfy 0 < step < t_max")
    count = int(np.floor((t_max - system.t0) / step + 1e-9)) + 1
    grid = system.t0 + step * np.arange(count)
    return integrate_at(system, grid, rtol=rtol, atol=atol, method=method)


def check_jacobian(system: OdeSystem, t: float, state, fd_step: float = 1e-6) -> float:
    """Max entry-wise deviation between the analytic Jacobian and central differences."""
    if system.jacobian is None:
        raise ValueError("system has no analytic Jacobian")
    y = np.asarray(state, dtype=float)
    analytic = np.asarray(system.jacobian(t, y), dtype=float)
    numeric = np.empty_like(analytic)
    for k in range(y.size):
        e = np.zeros_like(y)
        e[k] = fd_step
        numeric[:, k] = (
            np.asarray(system.rhs(t, y + e)) - np.asarray(system.rhs(t, y - e))
        ) / (2.0 * fd_step)
    return float(np.max(np.abs(analytic - numeric)))
