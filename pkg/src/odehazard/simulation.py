"""Sampling survival times, administrative censoring and the replication harness.

Models without a closed-form quantile are sampled by grid inversion: solve
the ODE on an equally spaced grid, fit a monotone (Fritsch-Carlson) cubic
Hermite interpolant through the points ``(H(t_j), t_j)`` and evaluate it at
``-log(u)``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .data import SurvivalDataset
from .inference import McmcConfig, PriorSpec, run_mcmc
from .models import (
    HazardModel,
    LogisticModel,
    LogisticParams,
    logistic_cumhaz,
    logistic_quantile,
    make_model,
)
from .ode import OdeSystem, integrate_at, integrate_grid

log = logging.getLogger(__name__)


class CoverageError(ValueError):
    """A requested draw lies beyond the cumulative hazard covered by the grid."""


# -- monotone interpolation --------------------------------------------------


def fritsch_carlson_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Node derivatives for a shape-preserving cubic Hermite interpolant.

    Three-point initial slopes, zeroed at local extrema, then rescaled so
    that ``a^2 + b^2 <= 9`` on every interval (Fritsch & Carlson, 1980).
    """
    h = np.diff(x)
    delta = np.diff(y) / h
    n = x.size
    m = np.empty(n)
    if n == 2:
        m[:] = delta[0]
        return m
    m[0] = delta[0]
    m[-1] = delta[-1]
    m[1:-1] = 0.5 * (delta[:-1] + delta[1:])
    flip = delta[:-1] * delta[1:] <= 0
    m[1:-1][flip] = 0.0
    flat = delta == 0
    m[:-1][flat] = 0.0
    m[1:][flat] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(flat, 0.0, m[:-1] / delta)
        b = np.where(flat, 0.0, m[1:] / delta)
    r2 = a * a + b * b
    over = r2 > 9.0
    if np.any(over):
        tau = np.zeros_like(r2)
        tau[over] = 3.0 / np.sqrt(r2[over])
        k = np.flatnonzero(over)
        # apply interval by interval; a node shared by two constrained
        # intervals keeps the smaller slope
        left = tau[k] * a[k] * delta[k]
        right = tau[k] * b[k] * delta[k]
        m[k] = np.where(np.abs(left) < np.abs(m[k]), left, m[k])
        m[k + 1] = np.where(np.abs(right) < np.abs(m[k + 1]), right, m[k + 1])
    return m


class MonotoneCubic:
    """Piecewise cubic Hermite interpolant with Fritsch-Carlson slopes."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size < 2 or x.size != y.size:
            raise ValueError("need at least two nodes of matching length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("abscissae must be strictly increasing")
        self.x = x
        self.y = y
        self.m = fritsch_carlson_slopes(x, y)

    def __call__(self, xq):
        xq = np.asarray(xq, dtype=float)
        k = np.clip(np.searchsorted(self.x, xq, side="right") - 1, 0, self.x.size - 2)
        x0 = self.x[k]
        h = self.x[k + 1] - x0
        s = (xq - x0) / h
        s2 = s * s
        s3 = s2 * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        return (
            h00 * self.y[k]
            + h10 * h * self.m[k]
            + h01 * self.y[k + 1]
            + h11 * h * self.m[k + 1]
        )


@dataclass
class GridInverter:
    """Approximate inverse of the cumulative hazard built from a solver grid."""

    times: np.ndarray
    cumhaz: np.ndarray
    interpolant: MonotoneCubic = field(repr=False)

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    @property
    def h_max(self) -> float:
        return float(self.cumhaz[-1])

    def __call__(self, x, truncate: bool = False):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("cumulative hazard values must be non-negative")
        beyond = x > self.h_max
        if np.any(beyond) and not truncate:
            raise CoverageError(
                f"{int(beyond.sum())} value(s) exceed the grid coverage H(t_max)={self.h_max:.6g}"
            )
        out = self.interpolant(np.minimum(x, self.h_max))
        return np.where(beyond, self.t_max, out)


def build_grid_inverter(
    system: OdeSystem, t_max: float, step: float, cumhaz_index: int = -1, **solver
) -> GridInverter:
    """Solve on ``[0, t_max]`` and interpolate ``H -> t``."""
    traj = integrate_grid(system, t_max, step, **solver)
    H = traj.component(cumhaz_index % system.dim)
    if np.any(np.diff(H) <= 0):
        raise ValueError("cumulative hazard is not strictly increasing on the grid (solver failure?)")
    return GridInverter(traj.times, H, MonotoneCubic(H, traj.times))


def simulate_by_inversion(inverter: GridInverter, n: int, seed=None, truncate: bool = False):
    """Draw ``t = H^{-1}(-log(1 - u))`` for uniform ``u``.

    With ``truncate`` draws beyond the grid are returned as ``t_max`` with a
    warning; the caller must then treat them as censored there.
    """
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    # 1 - random() lies in (0, 1], so -log is finite
    x = -np.log1p(-u)
    beyond = x > inverter.h_max
    if np.any(beyond) and truncate:
        warnings.warn(
            f"{int(beyond.sum())} draw(s) beyond t_max={inverter.t_max} truncated", stacklevel=2
        )
    return inverter(x, truncate=truncate)


def simulate_logistic(n: int, p: LogisticParams, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return logistic_quantile(rng.random(n), p)


def administrative_censor(times, c: float) -> SurvivalDataset:
    if not c > 0:
        raise ValueError("censoring time must be positive")
    times = np.asarray(times, dtype=float)
    return SurvivalDataset(np.minimum(times, c), (times <= c).astype(int))


def find_censoring_time(
    model: HazardModel, theta, rate: float, t_max: float = 1e4, xtol: float = 1e-14
) -> float:
    """Time ``c`` with ``S(c) = rate`` (bisection on the cumulative hazard)."""
    if not 0 < rate < 1:
        raise ValueError("censoring rate must lie in (0, 1)")
    target = -math.log(rate)
    theta = np.asarray(theta, dtype=float)
    if isinstance(model, LogisticModel) and not model.use_ode:
        p = model.params(theta)

        def H(c):
            return float(logistic_cumhaz(c, p))

    else:
        system = model.system(theta)
        k = system.dim - 1

        def H(c):
            return float(
                integrate_at(system, [c], rtol=model.rtol, atol=model.atol, method="auto").component(k)[0]
            )

    if H(t_max) < target:
        raise ValueError(f"rate {rate} unreachable: H({t_max}) < {target:.6g}")
    c = optimize.bisect(lambda c: H(c) - target, 0.0, t_max, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=400)
    return float(c)


# -- replication harness -----------------------------------------------------


SCENARIO_1 = {"model": "logistic", "params": {"lambda": 0.5, "kappa": 0.05, "h0": 3.5}}
SCENARIO_2 = {
    "model": "hazard-response",
    "params": {"lambda": 1.8, "kappa": 0.1, "alpha": 6.0, "beta": 4.8, "h0": 1e-2, "q0": 1e-6},
}


@dataclass
class ScenarioConfig:
    model: str
    params: dict
    sample_sizes: Sequence[int] = (250, 500, 1000, 5000)
    replications: int = 25
    censor_rates: Sequence[float] = (0.25, 0.5)
    t_max: float = 150.0
    step: float = 0.001
    seed: int = 0
    iterations: int = 55_000
    burn_in: int = 5_000
    thinning: int = 50
    prior_shape: float = 2.0
    prior_scale: float = 2.0
    free_initial: Optional[bool] = None

    def __post_init__(self):
        if any(n < 2 for n in self.sample_sizes):
            raise ValueError("sample sizes must be >= 2")
        if any(not 0 < r < 1 for r in self.censor_rates):
            raise ValueError("censoring rates must lie in (0, 1)")
        if self.replications < 1:
            raise ValueError("need at least one replication")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sample_sizes"] = list(self.sample_sizes)
        d["censor_rates"] = list(self.censor_rates)
        return d

    def build_model(self) -> HazardModel:
        if self.model == "logistic":
            fixed = {"h0": self.params["h0"]} if self.free_initial is False else None
            return LogisticModel(fixed=fixed)
        free = bool(self.free_initial)
        return make_model(
            self.model, h0=self.params.get("h0", 1e-2), q0=self.params.get("q0", 1e-6), free_initial=free
        )


@dataclass
class ReplicationResult:
    index: int
    n: int
    rate: float
    ok: bool
    mean: dict = field(default_factory=dict)
    median: dict = field(default_factory=dict)
    sd: dict = field(default_factory=dict)
    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)
    censored_fraction: float = float("nan")
    error: str = ""


@dataclass
class ScenarioSummary:
    """Per ``(n, rate)`` cell and parameter: averaged posterior statistics."""

    rows: list
    failures: dict
    replications: list = field(default_factory=list, repr=False)

    def table(self, n: int, rate: float) -> dict:
        return {r["parameter"]: r for r in self.rows if r["n"] == n and r["rate"] == rate}


def _replication_seed(master: int, cell: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=(cell, rep))


def simulate_times(model: HazardModel, theta, n: int, seed, inverter: Optional[GridInverter] = None,
                   truncate: bool = False) -> np.ndarray:
    if isinstance(model, LogisticModel) and inverter is None:
        return simulate_logistic(n, model.params(theta), seed)
    if inverter is None:
        raise ValueError("models without a closed-form quantile need a grid inverter")
    with warnings.catch_warnings():
        if truncate:
            warnings.simplefilter("ignore")
        return simulate_by_inversion(inverter, n, seed, truncate=truncate)


def run_replication(cfg: ScenarioConfig, cell: int, rep: int, n: int, rate: float, c: float,
                    inverter: Optional[GridInverter] = None) -> ReplicationResult:
    model = cfg.build_model()
    theta = model.theta_from(cfg.params)
    ss = _replication_seed(cfg.seed, cell, rep)
    data_seed, mcmc_seed = ss.spawn(2)
    res = ReplicationResult(index=rep, n=n, rate=rate, ok=False)
    try:
        # draws beyond t_max > c are censored at c either way
        times = simulate_times(model, theta, n, np.random.default_rng(data_seed), inverter,
                               truncate=inverter is not None and c < inverter.t_max)
        ds = administrative_censor(times, c)
        res.censored_fraction = 1.0 - ds.events / ds.n
        chain = run_mcmc(
            model,
            ds,
            PriorSpec(cfg.prior_shape, cfg.prior_scale),
            McmcConfig(
                iterations=cfg.iterations,
                burn_in=cfg.burn_in,
                thinning=cfg.thinning,
                seed=int(mcmc_seed.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)),
            ),
        )
    except Exception as exc:  # recorded, never silently dropped
        res.error = f"{type(exc).__name__}: {exc}"
        log.warning("replication %d (n=%d, rate=%g) failed: %s", rep, n, rate, res.error)
        return res
    for name in model.free_names:
        col = chain.column(name)
        res.mean[name] = float(col.mean())
        res.median[name] = float(np.median(col))
        res.sd[name] = float(col.std(ddof=1))
        res.lower[name] = float(np.quantile(col, 0.025))
        res.upper[name] = float(np.quantile(col, 0.975))
    res.ok = True
    return res


def aggregate(results: Sequence[ReplicationResult], truth: dict, names: Sequence[str]) -> list:
    """Average posterior summaries over replications; RMSE of the posterior mean."""
    rows = []
    ok = sorted((r for r in results if r.ok), key=lambda r: r.index)
    if not ok:
        return rows
    for name in names:
        means = np.array([r.mean[name] for r in ok])
        covered = np.array([r.lower[name] <= truth[name] <= r.upper[name] for r in ok])
        rows.append(
            {
                "parameter": name,
                "truth": float(truth[name]),
                "mean": float(means.mean()),
                "median": float(np.mean([r.median[name] for r in ok])),
                "sd": float(np.mean([r.sd[name] for r in ok])),
                "rmse": float(np.sqrt(np.mean((means - truth[name]) ** 2))),
                "coverage": float(covered.mean()),
                "replications": len(ok),
            }
        )
    return rows


def _job(args):
    return run_replication(*args)


def run_scenario(cfg: ScenarioConfig, jobs: int = 1) -> ScenarioSummary:
    model = cfg.build_model()
    theta = model.theta_from(cfg.params)
    inverter = None
    if not isinstance(model, LogisticModel):
        inverter = build_grid_inverter(model.system(theta), cfg.t_max, cfg.step)
    tasks = []
    cells = []
    for ci, (n, rate) in enumerate((n, r) for n in cfg.sample_sizes for r in cfg.censor_rates):
        c = find_censoring_time(model, theta, rate)
        cells.append((n, rate, c))
        for rep in range(cfg.replications):
            tasks.append((cfg, ci, rep, n, rate, c, inverter))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, tasks))
    else:
        results = [_job(t) for t in tasks]
    rows, failures = [], {}
    truth = dict(zip(model.param_names, theta))
    for n, rate, c in cells:
        cell = [r for r in results if r.n == n and r.rate == rate]
        failed = [r for r in cell if not r.ok]
        if failed:
            failures[f"n={n},rate={rate}"] = len(failed)
        for row in aggregate(cell, truth, model.free_names):
            row.update(n=n, rate=rate, censor_time=c)
            rows.append(row)
    return ScenarioSummary(rows, failures, results)
