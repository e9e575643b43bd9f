"""Likelihood, gamma priors, maximum likelihood and MCMC for ODE hazard models.

Positive parameters are handled on the log scale throughout: the optimiser and
the sampler both move in ``u = log(theta)`` and the change-of-variables term
``sum(u)`` is added to the sampling target, never to :func:`log_prior`.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .data import SurvivalDataset
from .models import HazardModel, LogisticModel, make_model
from .ode import IntegrationError

log = logging.getLogger(__name__)


class InferenceError(RuntimeError):
    pass


# -- likelihood --------------------------------------------------------------


class _Canonical:
    """Dataset reduced to sorted unique times with event and row counts."""

    __slots__ = ("times", "events", "counts")

    def __init__(self, ds: SurvivalDataset):
        uniq, inv = np.unique(ds.times, return_inverse=True)
        self.times = np.ascontiguousarray(uniq)
        self.events = np.bincount(inv, weights=ds.status, minlength=uniq.size)
        self.counts = np.bincount(inv, minlength=uniq.size).astype(float)


_canon_cache: dict = {}


def _canonical(ds: SurvivalDataset) -> _Canonical:
    key = id(ds)
    hit = _canon_cache.get(key)
    if hit is None or hit[0] is not ds:
        if len(_canon_cache) > 64:
            _canon_cache.clear()
        hit = (ds, _Canonical(ds))
        _canon_cache[key] = hit
    return hit[1]


def log_likelihood(model: HazardModel, theta, ds: SurvivalDataset) -> float:
    """``sum(delta_i log h(t_i)) - sum(H(t_i))``; ``-inf`` if the solve fails.

    One solve at the sorted unique observed times serves every row.
    """
    theta = np.asarray(theta, dtype=float)
    if not model.valid(theta):
        return -math.inf
    c = _canonical(ds)
    try:
        val = model.loglik_sorted(theta, c.times, c.events, c.counts)
    except (IntegrationError, FloatingPointError, ValueError):
        return -math.inf
    return val if math.isfinite(val) else -math.inf


# -- priors ------------------------------------------------------------------


@dataclass(frozen=True)
class PriorSpec:
    """Independent gamma priors; ``overrides`` maps a name to ``(shape, scale)``."""

    shape: float = 2.0
    scale: float = 2.0
    overrides: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        for k, sc in [("default", (self.shape, self.scale)), *self.overrides.items()]:
            if not (sc[0] > 0 and sc[1] > 0):
                raise ValueError(f"gamma prior for {k} needs positive shape and scale, got {sc}")

    def params_for(self, name: str) -> tuple:
        return tuple(self.overrides.get(name, (self.shape, self.scale)))

    def mean(self, name: str) -> float:
        k, s = self.params_for(name)
        return k * s

    def variance(self, name: str) -> float:
        k, s = self.params_for(name)
        return k * s * s


def gamma_logpdf(x, shape: float, scale: float):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (shape - 1.0) * np.log(x) - x / scale - gammaln(shape) - shape * math.log(scale)
    return np.where(x > 0, out, -np.inf)


def log_prior(model: HazardModel, theta, prior: PriorSpec = PriorSpec()) -> float:
    """Sum of gamma log-densities over the model's free parameters."""
    total = 0.0
    for i, name in enumerate(model.param_names):
        if name in model.fixed:
            continue
        x = float(theta[i])
        if not x > 0:
            return -math.inf
        k, s = prior.params_for(name)
        total += (k - 1.0) * math.log(x) - x / s - math.lgamma(k) - k * math.log(s)
    return total


def log_posterior(model, theta, ds: Optional[SurvivalDataset], prior: PriorSpec = PriorSpec()) -> float:
    lp = log_prior(model, theta, prior)
    if not math.isfinite(lp):
        return -math.inf
    if ds is None:
        return lp
    return log_likelihood(model, theta, ds) + lp


# -- maximum likelihood -----------------------------------------------------


@dataclass
class MleResult:
    estimate: dict
    theta: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    restarts: int

    def as_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "restarts": self.restarts,
        }


def default_starts(model: HazardModel, ds: Optional[SurvivalDataset]) -> list:
    """A few plausible natural-scale starting points for the free parameters."""
    rate = 1.0 if ds is None or ds.events == 0 else ds.events / float(ds.times.sum())
    grids = {
        "lambda": (0.5, 2.0),
        "kappa": (rate, 2.0 * rate),
        "alpha": (1.0, 5.0),
        "beta": (1.0, 5.0),
        "h0": (rate, 5.0 * rate),
        "q0": (1e-4,),
    }
    names = model.free_names
    return [np.array(c) for c in itertools.product(*(grids[n] for n in names))]


def _nelder_mead(fun, u0, maxiter, xatol=1e-8, fatol=1e-10):
    return optimize.minimize(
        fun,
        u0,
        method="Nelder-Mead",
        options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": 4 * maxiter, "adaptive": len(u0) > 2},
    )


def _minimise_log(fun_u, starts_u, restarts=3, maxiter=None, n_starts=4):
    """Simplex search with restarts from the incumbent until it stops improving."""
    d = len(starts_u[0])
    maxiter = maxiter or 2000 * d
    vals = [fun_u(u) for u in starts_u]
    order = np.argsort(vals)
    best = None
    total_iter = 0
    for idx in order[: min(n_starts, len(order))]:
        res = _nelder_mead(fun_u, starts_u[idx], maxiter)
        total_iter += res.nit
        if best is None or res.fun < best.fun:
            best = res
    n_restart = 0
    for n_restart in range(1, restarts + 1):
        res = _nelder_mead(fun_u, best.x, maxiter)
        total_iter += res.nit
        improved = best.fun - res.fun
        if res.fun <= best.fun:
            best = res
        if improved < 1e-9:
            break
    return best, total_iter, n_restart


def fit_mle(
    model: HazardModel,
    ds: SurvivalDataset,
    init: Optional[Mapping[str, float]] = None,
    restarts: int = 3,
    maxiter: Optional[int] = None,
) -> MleResult:
    """Maximise the log-likelihood over the log of the free parameters."""
    if ds is None or ds.n == 0:
        raise InferenceError("cannot fit an empty dataset")
    if ds.events == 0:
        raise InferenceError(
            "all observations are censored: the likelihood increases without bound as the hazard "
            "goes to zero, so no maximum exists"
        )
    idx = model.free_index
    base = model.expand(np.ones(idx.size))

    def nll(u):
        theta = base.copy()
        theta[idx] = np.exp(u)
        v = log_likelihood(model, theta, ds)
        return -v if math.isfinite(v) else 1e300

    if init is not None:
        starts = [np.log([float(init[n]) for n in model.free_names])]
    else:
        starts = [np.log(s) for s in default_starts(model, ds)]
    res, nit, nres = _minimise_log(nll, starts, restarts, maxiter)
    theta = base.copy()
    theta[idx] = np.exp(res.x)
    ll = log_likelihood(model, theta, ds)
    if not math.isfinite(ll):
        raise InferenceError("optimisation ended at a point with non-finite log-likelihood")
    return MleResult(
        estimate=dict(zip(model.param_names, map(float, theta))),
        theta=theta,
        log_likelihood=ll,
        converged=bool(res.success),
        iterations=int(nit),
        restarts=int(nres),
    )


# -- MCMC --------------------------------------------------------------------


@dataclass
class McmcConfig:
    iterations: int = 55_000
    burn_in: int = 5_000
    thinning: int = 50
    seed: Optional[int] = None
    batch_size: int = 50
    target_accept: float = 0.44
    init: Optional[Mapping[str, float]] = None
    initial_scale: Optional[float] = None

    def validate(self):
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SamplerOutput:
    samples: np.ndarray  # retained states, unconstrained scale
    log_target: np.ndarray
    acceptance: np.ndarray  # per coordinate, after burn-in
    log_scales: np.ndarray  # final proposal log-sds


def adaptive_mwg(
    log_target: Callable[[np.ndarray], float],
    x0,
    iterations: int,
    rng: np.random.Generator,
    burn_in: int = 0,
    thinning: int = 1,
    log_scales=None,
    batch_size: int = 50,
    target_accept: float = 0.44,
) -> SamplerOutput:
    """Adaptive Metropolis-within-Gibbs with coordinate-wise Gaussian random walks.

    After each batch of ``batch_size`` sweeps, each coordinate's log proposal
    sd moves by ``min(0.01, b**-0.5)`` (``b`` the batch index) up if its batch
    acceptance rate exceeded ``target_accept`` and down otherwise.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    ls = np.zeros(d) if log_scales is None else np.array(log_scales, dtype=float)
    cur = log_target(x)
    if not math.isfinite(cur):
        raise InferenceError("initial log-posterior is not finite")
    n_keep = (iterations - burn_in) // thinning
    samples = np.empty((n_keep, d))
    traces = np.empty(n_keep)
    batch_acc = np.zeros(d)
    post_acc = np.zeros(d)
    batch = 0
    kept = 0
    z_all = rng.standard_normal((iterations, d))
    logu_all = np.log(rng.random((iterations, d)))
    scales = np.exp(ls)
    for it in range(iterations):
        z = z_all[it]
        logu = logu_all[it]
        for i in range(d):
            old = x[i]
            x[i] = old + scales[i] * z[i]
            prop = log_target(x)
            if logu[i] < prop - cur:
                cur = prop
                batch_acc[i] += 1.0
                if it >= burn_in:
                    post_acc[i] += 1.0
            else:
                x[i] = old
        if (it + 1) % batch_size == 0:
            batch += 1
            delta = min(0.01, batch ** -0.5)
            ls += np.where(batch_acc / batch_size > target_accept, delta, -delta)
            scales = np.exp(ls)
            batch_acc[:] = 0.0
        if it >= burn_in and (it - burn_in + 1) % thinning == 0 and kept < n_keep:
            samples[kept] = x
            traces[kept] = cur
            kept += 1
    return SamplerOutput(samples, traces, post_acc / max(1, iterations - burn_in), ls)


SAMPLERS = {"amwg": adaptive_mwg}


def _numerical_hessian_diag(f, u, step=1e-3):
    f0 = f(u)
    out = np.empty(u.size)
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = step
        out[i] = (f(u + e) - 2.0 * f0 + f(u - e)) / step**2
    return out


@dataclass
class Chain:
    """Posterior draws on the natural scale (every model parameter, fixed ones included)."""

    names: tuple
    draws: np.ndarray
    log_posterior: np.ndarray
    free_names: tuple = ()
    acceptance: dict = field(default_factory=dict)
    burn_in: int = 0
    thinning: int = 1
    iterations: int = 0
    seed: Optional[int] = None
    model: dict = field(default_factory=dict)
    log_scales: dict = field(default_factory=dict)

    def __len__(self):
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def summary(self, quantiles=(0.025, 0.1, 0.5, 0.9, 0.975)) -> dict:
        out = {}
        for j, name in enumerate(self.names):
            col = self.draws[:, j]
            entry = {
                "mean": float(col.mean()),
                "median": float(np.median(col)),
                "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                "quantiles": {str(q): float(np.quantile(col, q)) for q in quantiles},
                "fixed": name not in self.free_names,
            }
            if name in self.free_names:
                entry["acceptance"] = self.acceptance.get(name)
                if col.size >= 100 and np.ptp(col) > 0:
                    tau = iat(col)
                    entry["iat"] = tau
                    entry["ess"] = col.size / tau
            out[name] = entry
        return out

    def to_csv(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([*self.names, "log_posterior"])
            for row, lp in zip(self.draws, self.log_posterior):
                w.writerow([repr(float(v)) for v in row] + [repr(float(lp))])
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path, model: Optional[HazardModel] = None) -> "Chain":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader if r], dtype=float)
        if "log_posterior" in header:
            k = header.index("log_posterior")
            lp = rows[:, k] if rows.size else np.empty(0)
            names = tuple(h for i, h in enumerate(header) if i != k)
            draws = np.delete(rows, k, axis=1) if rows.size else np.empty((0, len(names)))
        else:
            names = tuple(header)
            draws = rows
            lp = np.full(rows.shape[0], np.nan)
        free = names
        if model is not None:
            missing = [n for n in model.param_names if n not in names and n not in model.fixed]
            if missing:
                raise ValueError(f"chain file lacks parameter columns {missing}")
            # append fixed parameters absent from the file
            extra = [n for n in model.param_names if n not in names]
            if extra:
                draws = np.column_stack([draws] + [np.full(len(draws), model.fixed[n]) for n in extra])
                names = names + tuple(extra)
            order = [names.index(n) for n in model.param_names]
            draws = draws[:, order]
            names = tuple(model.param_names)
            free = tuple(n for n in names if np.ptp(draws[:, names.index(n)]) > 0 or n in model.free_names)
        return cls(names=names, draws=draws, log_posterior=lp, free_names=free)

    def thetas(self, model: HazardModel) -> np.ndarray:
        """Draws reordered to ``model.param_names`` order."""
        return self.draws[:, [self.names.index(n) for n in model.param_names]]


def map_estimate(model: HazardModel, ds, prior: PriorSpec, init=None):
    """Mode of the sampling target (log-parameter scale, Jacobian included)."""
    idx = model.free_index
    base = model.expand(np.ones(idx.size))

    def neg(u):
        theta = base.copy()
        theta[idx] = np.exp(u)
        v = log_posterior(model, theta, ds, prior) + float(np.sum(u))
        return -v if math.isfinite(v) else 1e300

    if init is not None:
        starts = [np.log([float(init[n]) for n in model.free_names])]
    else:
        starts = [np.log(s) for s in default_starts(model, ds)]
    res, _, _ = _minimise_log(neg, starts, restarts=2)
    return res.x, neg


START_BOX = math.log(1e4)  # start search keeps every free parameter in [1e-4, 1e4]


def _start_point(model: HazardModel, ds, prior: PriorSpec, init=None) -> np.ndarray:
    """Initial state on the log scale: ``init`` if given, else the MLE, else the target mode.

    The target mode on the log scale can sit on a narrow spike carrying little
    posterior mass, which a coordinate-wise sampler is slow to leave; with
    enough data the MLE lies in the bulk of the posterior instead. When the
    MLE runs to the edge of the search box (too little information) the
    target mode is used.
    """
    if init is not None:
        return np.log([float(init[n]) for n in model.free_names])
    if ds is not None and ds.events > 0:
        idx = model.free_index
        base = model.expand(np.ones(idx.size))

        def nll(u):
            if np.any(np.abs(u) > START_BOX):
                return 1e300
            theta = base.copy()
            theta[idx] = np.exp(u)
            v = log_likelihood(model, theta, ds)
            return -v if math.isfinite(v) else 1e300

        starts = [np.log(s) for s in default_starts(model, ds)]
        res, _, _ = _minimise_log(nll, starts, restarts=1, maxiter=400 * idx.size)
        if res.fun < 1e300 and np.all(np.abs(res.x) < START_BOX - 0.5):
            return res.x
        log.info("MLE start unavailable or on the search boundary; starting at the posterior mode")
    u0, _ = map_estimate(model, ds, prior)
    return u0


def run_mcmc(
    model: HazardModel,
    ds: Optional[SurvivalDataset],
    prior: PriorSpec = PriorSpec(),
    config: McmcConfig = McmcConfig(),
    sampler: str = "amwg",
) -> Chain:
    """Sample the posterior of the free parameters; ``ds=None`` samples the prior.

    The chain starts at ``config.init``, else at the MLE, else (no events) at
    the mode of the log-scale target. Initial proposal sds come from the
    curvature of the target there (2.4 conditional sds) unless
    ``config.initial_scale`` is given.
    """
    config.validate()
    seed = config.seed
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2**63))
    rng = np.random.default_rng(seed)
    idx = model.free_index
    base = model.expand(np.ones(idx.size))

    def target(u):
        theta = base.copy()
        theta[idx] = np.exp(u)
        lp = log_prior(model, theta, prior)
        if not math.isfinite(lp):
            return -math.inf
        ll = 0.0 if ds is None else log_likelihood(model, theta, ds)
        return ll + lp + float(np.sum(u))

    u0 = _start_point(model, ds, prior, config.init)
    if config.initial_scale is not None:
        ls0 = np.full(idx.size, math.log(config.initial_scale))
    else:
        curv = -_numerical_hessian_diag(lambda u: max(target(u), -1e300), u0)
        with np.errstate(divide="ignore", invalid="ignore"):
            sd = np.where(curv > 0, 2.4 / np.sqrt(curv), 0.1)
        ls0 = np.log(np.clip(sd, 1e-3, 5.0))
    out = SAMPLERS[sampler](
        target,
        u0,
        config.iterations,
        rng,
        burn_in=config.burn_in,
        thinning=config.thinning,
        log_scales=ls0,
        batch_size=config.batch_size,
        target_accept=config.target_accept,
    )
    draws = np.tile(base, (out.samples.shape[0], 1))
    draws[:, idx] = np.exp(out.samples)
    # report the natural-scale log-posterior (no Jacobian term)
    lpost = out.log_target - out.samples.sum(axis=1)
    free = model.free_names
    return Chain(
        names=tuple(model.param_names),
        draws=draws,
        log_posterior=lpost,
        free_names=free,
        acceptance={n: float(a) for n, a in zip(free, out.acceptance)},
        burn_in=config.burn_in,
        thinning=config.thinning,
        iterations=config.iterations,
        seed=seed,
        model=model.config(),
        log_scales={n: float(s) for n, s in zip(free, out.log_scales)},
    )


# -- diagnostics -------------------------------------------------------------


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    if acov[0] <= 0:
        raise InferenceError("constant chain: autocorrelation undefined")
    return acov / acov[0]


def iat(x) -> float:
    """Integrated autocorrelation time, Geyer's initial positive sequence estimator."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 100:
        raise InferenceError("need at least 100 samples to estimate the IAT")
    if np.ptp(x) == 0:
        raise InferenceError("constant chain: IAT undefined")
    rho = autocorrelation(x)
    n_pairs = rho.size // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    neg = np.flatnonzero(pairs <= 0)
    m = neg[0] if neg.size else n_pairs
    tau = -1.0 + 2.0 * float(np.sum(pairs[:m]))
    return max(tau, 1.0 / x.size)


def effective_sample_size(x) -> float:
    x = np.asarray(x, dtype=float)
    return x.size / iat(x)


def model_from_config(cfg: Mapping) -> HazardModel:
    """Rebuild a model from :meth:`HazardModel.config` output."""
    cfg = dict(cfg)
    name = cfg.pop("model")
    fixed = cfg.pop("fixed", {})
    if name == "logistic":
        return LogisticModel(fixed=fixed, rtol=cfg.get("rtol", 1e-8), atol=cfg.get("atol", 1e-10))
    return make_model(name, free_initial=True, fixed=fixed, **{k: v for k, v in cfg.items() if k in ("rtol", "atol", "log_scale", "method")})
