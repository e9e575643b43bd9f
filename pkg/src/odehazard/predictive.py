"""Posterior-predictive curves from an MCMC chain.

For draws ``theta_j`` the predictive density of a new subject is the average
of ``h(t|theta_j) exp(-H(t|theta_j))``; its survival function is the average
of ``exp(-H)`` and its hazard is the ratio of the two averages. All three
estimators, and the pointwise bands, reuse a single solve per draw.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .inference import Chain
from .models import DEGENERATE_D, HazardModel, steady_state_values
from .ode import IntegrationError

log = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.01
COMPONENTS = ("hazard", "survival", "cumhaz", "density", "response")


class PredictiveError(RuntimeError):
    pass


@dataclass
class DrawCurves:
    times: np.ndarray
    h: np.ndarray
    H: np.ndarray
    q: Optional[np.ndarray]
    n_failed: int = 0

    @property
    def n_draws(self) -> int:
        return self.h.shape[0]

    def component(self, name: str) -> np.ndarray:
        if name == "hazard":
            return self.h
        if name == "cumhaz":
            return self.H
        if name == "survival":
            return np.exp(-self.H)
        if name == "density":
            return self.h * np.exp(-self.H)
        if name == "response":
            if self.q is None:
                raise ValueError("model has no response component")
            return self.q
        raise ValueError(f"unknown component {name!r}; expected one of {COMPONENTS}")


@dataclass
class PredictiveCurve:
    times: np.ndarray
    estimate: np.ndarray
    kind: str
    bands: dict = field(default_factory=dict)
    mean: Optional[np.ndarray] = None
    n_draws: int = 0
    n_failed: int = 0

    def to_csv(self, path):
        path = Path(path)
        cols = ["time", "estimate"]
        data = [self.times, self.estimate]
        if self.mean is not None:
            cols.append("mean")
            data.append(self.mean)
        for level in sorted(self.bands):
            cols.append(f"q{level:g}")
            data.append(self.bands[level])
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*data):
                w.writerow([repr(float(v)) for v in row])
        os.replace(tmp, path)


def draw_curves(chain: Chain, model: HazardModel, t_grid: Sequence[float]) -> DrawCurves:
    """Solve once per draw on ``t_grid``; failed draws are dropped (at most 1%)."""
    t = np.ascontiguousarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("time grid must be a non-empty 1-d array")
    if np.any(np.diff(t) < 0) or t[0] < 0:
        raise ValueError("time grid must be sorted and non-negative")
    thetas = chain.thetas(model)
    if thetas.shape[0] == 0:
        raise PredictiveError("chain is empty")
    hs, Hs, qs = [], [], []
    failed = 0
    for theta in thetas:
        try:
            cur = model.curves(theta, t)
        except (IntegrationError, ValueError):
            failed += 1
            continue
        if not (np.all(np.isfinite(cur["H"])) and np.all(cur["h"] > 0)):
            failed += 1
            continue
        hs.append(cur["h"])
        Hs.append(cur["H"])
        if "q" in cur:
            qs.append(cur["q"])
    if failed > MAX_FAILED_FRACTION * thetas.shape[0]:
        raise PredictiveError(
            f"{failed} of {thetas.shape[0]} draws failed to solve (limit {MAX_FAILED_FRACTION:.0%})"
        )
    if failed:
        log.warning("excluded %d failed draw(s) of %d", failed, thetas.shape[0])
    return DrawCurves(t, np.array(hs), np.array(Hs), np.array(qs) if qs else None, failed)


def _curves(chain, model, t_grid, curves):
    return curves if curves is not None else draw_curves(chain, model, t_grid)


def _shifted_weights(H):
    # exp(-H) scaled per grid time so the largest weight is 1
    shift = H.min(axis=0)
    return np.exp(-(H - shift)), shift


def predictive_survival(chain, model, t_grid, curves: Optional[DrawCurves] = None) -> PredictiveCurve:
    dc = _curves(chain, model, t_grid, curves)
    w, shift = _shifted_weights(dc.H)
    est = np.exp(-shift) * w.mean(axis=0)
    return PredictiveCurve(dc.times, est, "survival", n_draws=dc.n_draws, n_failed=dc.n_failed)


def predictive_hazard(chain, model, t_grid, curves: Optional[DrawCurves] = None) -> PredictiveCurve:
    dc = _curves(chain, model, t_grid, curves)
    w, _ = _shifted_weights(dc.H)
    est = (dc.h * w).sum(axis=0) / w.sum(axis=0)
    return PredictiveCurve(dc.times, est, "hazard", n_draws=dc.n_draws, n_failed=dc.n_failed)


def predictive_density(chain, model, t_grid, curves: Optional[DrawCurves] = None) -> PredictiveCurve:
    dc = _curves(chain, model, t_grid, curves)
    est = (dc.h * np.exp(-dc.H)).mean(axis=0)
    return PredictiveCurve(dc.times, est, "density", n_draws=dc.n_draws, n_failed=dc.n_failed)


def pointwise_bands(
    chain,
    model,
    t_grid,
    levels: Sequence[float] = (0.025, 0.5, 0.975),
    component: str = "hazard",
    curves: Optional[DrawCurves] = None,
) -> PredictiveCurve:
    """Empirical quantiles of a per-draw component at each grid time.

    ``estimate`` is the pointwise median and ``mean`` the pointwise mean.
    """
    levels = [float(q) for q in levels]
    if any(not 0 < q < 1 for q in levels):
        raise ValueError("band levels must lie in (0, 1)")
    dc = _curves(chain, model, t_grid, curves)
    vals = dc.component(component)
    bands = {q: np.quantile(vals, q, axis=0) for q in levels}
    return PredictiveCurve(
        dc.times,
        np.median(vals, axis=0),
        component,
        bands=bands,
        mean=vals.mean(axis=0),
        n_draws=dc.n_draws,
        n_failed=dc.n_failed,
    )


def equilibrium_summary(chain: Chain) -> dict:
    """Posterior probability that the hazard-response system is in equilibrium.

    A draw is in equilibrium when ``h* > 0``, ``q* > 0`` and ``D > 0``; draws
    with ``|D|`` below the degeneracy threshold count as not in equilibrium.
    """
    lam, kappa, alpha, beta = (chain.column(n) for n in ("lambda", "kappa", "alpha", "beta"))
    D, h_star, q_star = steady_state_values(lam, kappa, alpha, beta)
    degenerate = np.abs(D) < DEGENERATE_D
    eq = (~degenerate) & (D > 0) & (h_star > 0) & (q_star > 0)
    n = len(chain)
    return {
        "p_equilibrium": float(eq.mean()) if n else float("nan"),
        "n_draws": n,
        "n_equilibrium": int(eq.sum()),
        "n_degenerate": int(degenerate.sum()),
        "h_star": h_star[eq],
        "q_star": q_star[eq],
    }
