"""Right-censored survival data: loading, summaries and the Kaplan-Meier curve."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid or unreadable survival data."""


@dataclass(frozen=True)
class SurvivalDataset:
    """Observed times ``t_i = min(o_i, c_i)`` and event indicators ``delta_i``."""

    times: np.ndarray
    status: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        status_raw = np.asarray(self.status).reshape(-1)
        if times.size == 0:
            raise DataError("dataset must contain at least one observation")
        if times.size != status_raw.size:
            raise DataError(f"times ({times.size}) and status ({status_raw.size}) differ in length")
        if not np.all(np.isfinite(times)):
            raise DataError("times must be finite")
        bad = np.flatnonzero(times <= 0)
        if bad.size:
            raise DataError(
                f"{bad.size} non-positive time(s), first at row {bad[0]} (t={times[bad[0]]!r})"
            )
        if not np.all(np.isin(status_raw, (0, 1))):
            raise DataError("status values must be 0 (censored) or 1 (event)")
        times.setflags(write=False)
        status = status_raw.astype(np.int8)
        status.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "status", status)

    @property
    def n(self) -> int:
        return int(self.times.size)

    @property
    def events(self) -> int:
        return int(self.status.sum())

    def sorted(self) -> "SurvivalDataset":
        order = np.lexsort((-self.status, self.times))
        return SurvivalDataset(self.times[order], self.status[order])


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function, ``value(t) = values[k]`` for ``knots[k] <= t < knots[k+1]``."""

    knots: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        vals = np.concatenate(([1.0], self.values))
        return vals[idx + 1]


def load_dataset(path, time_column: str = "time", status_column: str = "status") -> SurvivalDataset:
    """Read a headed CSV; any invalid row rejects the whole file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in (time_column, status_column):
            if col not in fields:
                raise DataError(f"column {col!r} not found in {path} (have {fields})")
        times, status = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                times.append(float(row[time_column]))
                s = float(row[status_column])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: unparseable numeric value") from None
            if s not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: status {row[status_column]!r} not in {{0,1}}")
            status.append(int(s))
    try:
        return SurvivalDataset(np.array(times), np.array(status, dtype=int))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_dataset(ds: SurvivalDataset, path, time_column: str = "time", status_column: str = "status"):
    """Write ``ds`` as CSV; floats use ``repr`` so a reload is exact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([time_column, status_column])
        for t, s in zip(ds.times, ds.status):
            w.writerow([repr(float(t)), int(s)])
    os.replace(tmp, path)


def censoring_summary(ds: SurvivalDataset) -> dict:
    events = ds.events
    censored = ds.n - events
    return {
        "n": ds.n,
        "events": events,
        "censored": censored,
        "rate": float(Fraction(censored, ds.n)),
    }


def kaplan_meier(ds: SurvivalDataset) -> StepFunction:
    """Product-limit estimate; at tied times events are counted before censorings."""
    times, status = ds.times, ds.status
    uniq, inv = np.unique(times, return_inverse=True)
    deaths = np.bincount(inv, weights=status, minlength=uniq.size)
    leaving = np.bincount(inv, minlength=uniq.size)
    at_risk = ds.n - np.concatenate(([0], np.cumsum(leaving)[:-1]))
    keep = deaths > 0
    factors = 1.0 - deaths[keep] / at_risk[keep]
    return StepFunction(uniq[keep], np.cumprod(factors))
