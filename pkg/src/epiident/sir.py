"""Deterministic SIR model and fixed-step RK4 integration.

    dS/dt = -beta * S * I
    dI/dt =  beta * S * I - alpha * I
    dR/dt =  alpha * I

All populations are absolute counts (persons), rates are per day.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

__all__ = [
    "DEFAULT_STEP",
    "DenseSolution",
    "EpidemicParameters",
    "IntegrationError",
    "NoPeakError",
    "StateVector",
    "TimeGrid",
    "Trajectory",
    "basic_reproduction_number",
    "default_initial",
    "final_size",
    "integrate_sir",
    "integrate_to_quiescence",
    "peak_of",
    "read_trajectory_csv",
    "write_trajectory_csv",
]

DEFAULT_STEP = 0.05
DEFAULT_HORIZON = 150.0
# negative state values above this are round-off and get clamped to zero
_ROUNDOFF_FLOOR = -1e-12


class IntegrationError(RuntimeError):
    """The integrator produced a non-finite or strongly negative state."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6f}")
        self.time = time


class NoPeakError(ValueError):
    pass


@dataclass(frozen=True)
class EpidemicParameters:
    alpha: float
    beta: float
    population: int

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if int(self.population) != self.population or self.population < 2:
            raise ValueError(f"population must be an integer >= 2, got {self.population}")

    @property
    def r0(self) -> float:
        return basic_reproduction_number(self)

    def with_rates(self, alpha: float, beta: float) -> EpidemicParameters:
        return EpidemicParameters(alpha, beta, self.population)


@dataclass(frozen=True)
class StateVector:
    susceptible: float
    infectious: float
    recovered: float

    def __post_init__(self):
        if min(self.susceptible, self.infectious, self.recovered) < 0:
            raise ValueError(f"state components must be non-negative: {self}")

    @property
    def total(self) -> float:
        return self.susceptible + self.infectious + self.recovered

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.susceptible, self.infectious, self.recovered)


def default_initial(population: int, infectious: int = 1) -> StateVector:
    """Fully susceptible population seeded with `infectious` cases."""
    return StateVector(population - infectious, infectious, 0)


@dataclass(frozen=True)
class TimeGrid:
    """Observation times (days) inside the span [t_start, t_end]."""

    t_start: float
    t_end: float
    times: np.ndarray = field(compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if not self.t_start < self.t_end:
            raise ValueError("t_start must be smaller than t_end")
        if times.ndim != 1 or times.size == 0:
            raise ValueError("observation times must be a non-empty 1-d sequence")
        if np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if times[0] < self.t_start or times[-1] > self.t_end:
            raise ValueError("observation times must lie within [t_start, t_end]")

    @classmethod
    def daily(cls, t_end: float = DEFAULT_HORIZON, t_start: float = 0.0) -> TimeGrid:
        return cls(t_start, t_end, np.arange(t_start, np.floor(t_end) + 1.0))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return (
            self.t_start == other.t_start
            and self.t_end == other.t_end
            and np.array_equal(self.times, other.times)
        )

    def __hash__(self):
        return hash((self.t_start, self.t_end, self.times.tobytes()))


@dataclass
class Trajectory:
    """Prevalence series on a grid; `kind` is one of ode, ctmc, synthetic.

    The ODE solution also carries the S and R series.
    """

    grid: TimeGrid
    prevalence: np.ndarray
    kind: str = "ode"
    susceptible: np.ndarray | None = None
    recovered: np.ndarray | None = None
    dense: DenseSolution | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.prevalence = np.asarray(self.prevalence, dtype=float)
        if self.prevalence.shape != self.grid.times.shape:
            raise ValueError(
                f"prevalence length {self.prevalence.size} does not match grid length {len(self.grid)}"
            )
        if self.kind not in ("ode", "ctmc", "synthetic"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def with_values(self, values, kind: str = "synthetic") -> Trajectory:
        return Trajectory(self.grid, values, kind)


def basic_reproduction_number(params: EpidemicParameters) -> float:
    return params.beta * params.population / params.alpha


@numba.njit(cache=True)
def _rk4_step(s, i, r, alpha, beta, h):
    k1s = -beta * s * i
    k1r = alpha * i
    k1i = -k1s - k1r
    s2 = s + 0.5 * h * k1s
    i2 = i + 0.5 * h * k1i
    k2s = -beta * s2 * i2
    k2r = alpha * i2
    k2i = -k2s - k2r
    s3 = s + 0.5 * h * k2s
    i3 = i + 0.5 * h * k2i
    k3s = -beta * s3 * i3
    k3r = alpha * i3
    k3i = -k3s - k3r
    s4 = s + h * k3s
    i4 = i + h * k3i
    k4s = -beta * s4 * i4
    k4r = alpha * i4
    k4i = -k4s - k4r
    s += h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s)
    i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i)
    r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    return s, i, r


@numba.njit(cache=True)
def _rk4_dense(alpha, beta, s0, i0, r0, h, n_steps):
    """Full RK4 path; returns (states, status, failing step)."""
    out = np.empty((n_steps + 1, 3))
    s, i, r = s0, i0, r0
    out[0, 0] = s
    out[0, 1] = i
    out[0, 2] = r
    for k in range(n_steps):
        s, i, r = _rk4_step(s, i, r, alpha, beta, h)
        if not (np.isfinite(s) and np.isfinite(i) and np.isfinite(r)):
            return out, 1, k + 1
        if s < 0.0:
            if s < _ROUNDOFF_FLOOR:
                return out, 2, k + 1
            s = 0.0
        if i < 0.0:
            if i < _ROUNDOFF_FLOOR:
                return out, 2, k + 1
            i = 0.0
        if r < 0.0:
            if r < _ROUNDOFF_FLOOR:
                return out, 2, k + 1
            r = 0.0
        out[k + 1, 0] = s
        out[k + 1, 1] = i
        out[k + 1, 2] = r
    return out, 0, 0


def _step_indices(grid: TimeGrid, step: float) -> np.ndarray:
    offsets = (grid.times - grid.t_start) / step
    idx = np.rint(offsets).astype(np.int64)
    if np.any(np.abs(offsets - idx) > 1e-9 * np.maximum(1.0, offsets)):
        raise ValueError(f"integrator step {step} does not divide the observation spacing")
    return idx


@dataclass
class DenseSolution:
    """RK4 output at every integrator step."""

    times: np.ndarray
    states: np.ndarray

    def prevalence_at(self, t) -> np.ndarray:
        """Linear interpolation of I(t); values outside the span clamp to the endpoints."""
        return np.interp(t, self.times, self.states[:, 1])


def integrate_dense(
    params: EpidemicParameters,
    initial: StateVector,
    t_start: float,
    t_end: float,
    step: float = DEFAULT_STEP,
) -> DenseSolution:
    n_steps = int(math.ceil((t_end - t_start) / step - 1e-9))
    states, status, at = _rk4_dense(
        float(params.alpha), float(params.beta), *map(float, initial.as_tuple()), step, n_steps
    )
    if status:
        msg = "non-finite state" if status == 1 else "negative state beyond round-off"
        raise IntegrationError(msg, t_start + at * step)
    return DenseSolution(t_start + step * np.arange(n_steps + 1), states)


def integrate_sir(
    params: EpidemicParameters,
    initial: StateVector,
    grid: TimeGrid,
    step: float = DEFAULT_STEP,
) -> Trajectory:
    """Integrate the SIR system with classical RK4 and sample it on `grid`.

    The returned trajectory carries S and R next to the prevalence. Raises
    IntegrationError naming the time of the first non-finite (or clearly
    negative) state.
    """
    idx = _step_indices(grid, step)
    dense = integrate_dense(params, initial, grid.t_start, grid.t_end, step)
    states = dense.states[idx]
    return Trajectory(
        grid, states[:, 1], "ode", states[:, 0].copy(), states[:, 2].copy(), dense
    )


def integrate_to_quiescence(
    params: EpidemicParameters,
    initial: StateVector,
    step: float = DEFAULT_STEP,
    threshold: float = 0.5,
    t_end: float = DEFAULT_HORIZON,
    max_t_end: float = 1e5,
) -> DenseSolution:
    """Integrate from t=0, doubling the horizon until I(t_end) < threshold."""
    while True:
        dense = integrate_dense(params, initial, 0.0, t_end, step)
        if dense.states[-1, 1] < threshold or initial.infectious == 0:
            return dense
        if t_end >= max_t_end:
            raise IntegrationError("prevalence did not fall below threshold", t_end)
        t_end *= 2


def final_size(params: EpidemicParameters, initial: StateVector) -> float:
    """S(infinity) from the final-size relation log(S/S0) = (beta/alpha)(S - S0 - I0).

    Solved by bracketed root finding on (0, S0).
    """
    from scipy.optimize import brentq

    s0, i0 = float(initial.susceptible), float(initial.infectious)
    if i0 == 0 or params.beta == 0:
        return s0
    k = params.beta / params.alpha

    def f(s):
        return math.log(s / s0) - k * (s - s0 - i0)

    # f(s0) = k*i0 > 0; f -> -inf as s -> 0
    lo = s0
    while f(lo) > 0:
        lo *= 0.5
        if lo < 1e-300:
            return 0.0
    return brentq(f, lo, s0, xtol=1e-14, rtol=1e-15, maxiter=500)


def peak_of(traj: Trajectory) -> tuple[float, float]:
    """(time, height) of the maximum prevalence; ties go to the earliest time."""
    values = traj.prevalence
    if values.size == 0:
        raise NoPeakError("empty trajectory")
    k = int(np.argmax(values))
    if values[k] <= 0:
        raise NoPeakError("trajectory is identically zero")
    return float(traj.times[k]), float(values[k])


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with_sr = traj.susceptible is not None and traj.recovered is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "I", "S", "R"] if with_sr else ["t", "I"])
        for k, t in enumerate(traj.times):
            row = [f"{t:.6f}", repr(float(traj.prevalence[k]))]
            if with_sr:
                row += [repr(float(traj.susceptible[k])), repr(float(traj.recovered[k]))]
            w.writerow(row)


def read_trajectory_csv(path, kind: str = "ode", t_end: float | None = None) -> Trajectory:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    times = np.array([float(r["t"]) for r in rows])
    grid = TimeGrid(float(times[0]), float(t_end if t_end is not None else times[-1]), times)
    prev = np.array([float(r["I"]) for r in rows])
    s = r_ = None
    if rows and "S" in rows[0]:
        s = np.array([float(r["S"]) for r in rows])
        r_ = np.array([float(r["R"]) for r in rows])
    return Trajectory(grid, prev, kind, s, r_)
