"""Residual-structure diagnostics: scatter tables, autocorrelation, variance vs mean."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .ctmc import Ensemble
from .sir import Trajectory, peak_of
from .synth import MIN_PREVALENCE, phase_of, scaled_residuals

__all__ = [
    "AcfCurve",
    "ResidualSeries",
    "UndefinedAcfError",
    "acf",
    "ensemble_acf",
    "phase_of",
    "residual_series",
    "variance_mean",
]

DEFAULT_MAX_LAG = 30


class UndefinedAcfError(ValueError):
    pass


@dataclass
class ResidualSeries:
    times: np.ndarray
    residuals: np.ndarray
    run_id: int
    phases: np.ndarray

    def __post_init__(self):
        if not (self.times.shape == self.residuals.shape == self.phases.shape):
            raise ValueError("times, residuals and phases must have equal length")
        if np.any(self.residuals < -1 - 1e-12):
            raise ValueError("scaled residuals are bounded below by -1")


def residual_series(values: np.ndarray, ode: Trajectory) -> list[ResidualSeries]:
    """Scaled residual series per run on the window where I_ODE >= 1."""
    res, keep = scaled_residuals(values, ode)
    peak_t, _ = peak_of(ode)
    times = ode.times[keep]
    phases = phase_of(times, peak_t)
    return [ResidualSeries(times, r, j, phases) for j, r in enumerate(res)]


def acf(series, max_lag: int = DEFAULT_MAX_LAG) -> np.ndarray:
    """Sample autocorrelation r_k = c_k / c_0 with mean-centring and divisor n."""
    x = np.asarray(series.residuals if isinstance(series, ResidualSeries) else series, dtype=float)
    n = x.size
    if n <= max_lag + 1:
        raise ValueError(f"series of length {n} is too short for max_lag={max_lag}")
    x = x - x.mean()
    c0 = np.dot(x, x)
    if not c0 > 1e-300:
        raise UndefinedAcfError("series has zero variance")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = np.dot(x[:-k], x[k:]) / c0
    return out


@dataclass
class AcfCurve:
    lags: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    runs_used: int
    runs_skipped: int = 0
    per_run: np.ndarray | None = field(default=None, repr=False)

    def write_csv(self, path, label: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "lag", "mean", "lower", "upper"])
            for k in range(self.lags.size):
                w.writerow([label, int(self.lags[k]), repr(float(self.mean[k])),
                            repr(float(self.lower[k])), repr(float(self.upper[k]))])


def ensemble_acf(series_list, max_lag: int = DEFAULT_MAX_LAG) -> AcfCurve:
    """Pointwise mean and 2.5/97.5 percentiles of the per-run ACFs."""
    curves = []
    skipped = 0
    for s in series_list:
        try:
            curves.append(acf(s, max_lag))
        except UndefinedAcfError:
            skipped += 1
    if not curves:
        raise UndefinedAcfError("no run has a defined autocorrelation")
    arr = np.array(curves)
    mean = arr.mean(axis=0)
    lo, hi = np.percentile(arr, [2.5, 97.5], axis=0)
    # percentiles of a degenerate sample can miss the mean by round-off
    lo = np.minimum(lo, mean)
    hi = np.maximum(hi, mean)
    return AcfCurve(np.arange(max_lag + 1), mean, lo, hi, len(curves), skipped, arr)


@dataclass
class VarianceMean:
    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    phases: np.ndarray

    def super_poisson_fraction(self, phase: str = "pre", min_mean: float = 1.0) -> float:
        """Share of grid points in `phase` with mean >= `min_mean` whose variance exceeds the mean."""
        sel = (self.phases == phase) & (self.mean >= min_mean)
        if not sel.any():
            return float("nan")
        return float(np.mean(self.variance[sel] > self.mean[sel]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mean", "variance", "phase"])
            for t, m, v, p in zip(self.times, self.mean, self.variance, self.phases):
                w.writerow([f"{t:.6f}", repr(float(m)), repr(float(v)), p])


def variance_mean(ensemble: Ensemble | np.ndarray, ode: Trajectory) -> VarianceMean:
    """Cross-run mean and (unbiased) variance of raw counts at every grid time."""
    values = ensemble.values if isinstance(ensemble, Ensemble) else np.asarray(ensemble, float)
    if values.shape[1] != len(ode.grid):
        raise ValueError("ensemble and ODE trajectory must share the grid")
    peak_t, _ = peak_of(ode)
    mean = values.mean(axis=0)
    var = values.var(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1])
    return VarianceMean(ode.times.copy(), mean, var, phase_of(ode.times, peak_t))


def write_residual_scatter(values: np.ndarray, ode: Trajectory, path) -> None:
    keep = ode.prevalence >= MIN_PREVALENCE
    peak_t, _ = peak_of(ode)
    res, _ = scaled_residuals(values, ode)
    times = ode.times[keep]
    prev = ode.prevalence[keep]
    phases = phase_of(times, peak_t)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "I_ode", "residual", "phase", "run"])
        for j, row in enumerate(res):
            for t, i, r, p in zip(times, prev, row, phases):
                w.writerow([f"{t:.6f}", repr(float(i)), repr(float(r)), p, j])
