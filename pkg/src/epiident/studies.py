"""Two illustrative studies: control projections from a near-equivalent fit cloud,
and peak (landmark) registration of CTMC trajectories."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import optimize

from .ctmc import Ensemble
from .rng import as_seed
from .sir import (
    DEFAULT_STEP,
    EpidemicParameters,
    StateVector,
    TimeGrid,
    Trajectory,
    _rk4_step,
    _step_indices,
    integrate_dense,
)
from .synth import _refined_peak, smooth

__all__ = [
    "ControlScenario",
    "ControlProjection",
    "RegistrationResult",
    "cumulative_incidence",
    "fit_cloud_to_incidence",
    "incidence_data",
    "project_control",
    "register_at_peak",
]

SSE_BAND = 1.1
# box for random multi-start points, in (alpha, beta) per day
START_BOX = ((0.02, 1.0), (1e-5, 5e-3))


def cumulative_incidence(traj: Trajectory) -> np.ndarray:
    """N - S(t): every infection so far, including the initial cases."""
    if traj.susceptible is None:
        raise ValueError("trajectory has no susceptible series")
    return (traj.susceptible[0] + traj.prevalence[0] + traj.recovered[0]) - traj.susceptible


@numba.njit(cache=True)
def _cum_sse(alpha, beta, s0, i0, r0, h, obs_idx, y):
    n = s0 + i0 + r0
    s, i, r = s0, i0, r0
    total = 0.0
    k = 0
    j = 0
    last = obs_idx[-1]
    while True:
        if k == obs_idx[j]:
            d = n - s - y[j]
            total += d * d
            j += 1
            if k == last:
                break
        s, i, r = _rk4_step(s, i, r, alpha, beta, h)
        if not (np.isfinite(s) and np.isfinite(i)) or s < -1e-12 or i < -1e-12:
            return np.inf
        s = max(s, 0.0)
        i = max(i, 0.0)
        k += 1
    return total


@dataclass
class CloudFit:
    params: np.ndarray  # (count, 2) alpha, beta
    sse: np.ndarray
    best_sse: float
    starts_used: int
    qualified: int


def fit_cloud_to_incidence(data: Trajectory, count: int, seed=None,
                           initial: StateVector | None = None, population: int | None = None,
                           max_starts: int | None = None, band: float = SSE_BAND,
                           probe_starts: int = 10, step: float = DEFAULT_STEP) -> CloudFit:
    """Near-equivalent fits of (alpha, beta) to cumulative incidence data.

    `data.prevalence` holds the cumulative incidence values.  A first set of
    fully converged Nelder-Mead runs locates the best SSE.  Further runs from
    random log-uniform starts in START_BOX stop as soon as the SSE falls within
    `band` times the best, so the cloud samples the whole near-equivalent set
    instead of collapsing onto the minimum.  Starts continue until `count`
    qualifying fits are found or `max_starts` is used up.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if initial is None:
        if population is None:
            raise ValueError("give initial state or population")
        initial = StateVector(population - 1.0, 1.0, 0.0)
    if data.grid.t_start != 0.0:
        raise ValueError("incidence data must start at t=0")
    y = np.asarray(data.prevalence, float)
    obs = _step_indices(data.grid, step)
    s0, i0, r0 = map(float, initial.as_tuple())
    rng = as_seed(seed).generator()
    lo = np.log([START_BOX[0][0], START_BOX[1][0]])
    hi = np.log([START_BOX[0][1], START_BOX[1][1]])
    max_starts = max_starts if max_starts is not None else 10 * count + probe_starts

    def f(x):
        return _cum_sse(math.exp(x[0]), math.exp(x[1]), s0, i0, r0, step, obs, y)

    opts = {"xatol": 1e-8, "fatol": 1e-12, "maxiter": 4000}
    best_x, best = None, np.inf
    for x0 in rng.uniform(lo, hi, size=(probe_starts, 2)):
        res = optimize.minimize(f, x0, method="Nelder-Mead", options=opts)
        if res.fun < best:
            best_x, best = res.x, float(res.fun)
    if not np.isfinite(best):
        raise RuntimeError("no start produced a finite fit")
    # the absolute floor keeps noise-free data from demanding an SSE below round-off
    threshold = band * best + 1e-9

    def stop(xk):
        if f(xk) <= threshold:
            raise StopIteration

    pts, vals = [np.exp(best_x)], [best]
    used = probe_starts
    while len(pts) < count and used < max_starts:
        x0 = rng.uniform(lo, hi)
        used += 1
        res = optimize.minimize(f, x0, method="Nelder-Mead", callback=stop, options=opts)
        if res.fun <= threshold:
            pts.append(np.exp(res.x))
            vals.append(float(res.fun))
    if len(pts) < count:
        warnings.warn(f"only {len(pts)} of {count} requested fits lie within the SSE band",
                      stacklevel=2)
    pts = np.array(pts)
    vals = np.array(vals)
    order = np.argsort(vals, kind="stable")[:count]
    return CloudFit(pts[order], vals[order], best, used, len(pts))


def incidence_data(params: EpidemicParameters, initial: StateVector, window: float,
                   sigma: float = 0.0, seed=None, step: float = DEFAULT_STEP) -> Trajectory:
    """Daily cumulative incidence on [0, window], optionally with relative Gaussian noise."""
    grid = TimeGrid.daily(window)
    dense = integrate_dense(params, initial, 0.0, grid.t_end, step)
    s = dense.states[_step_indices(grid, step), 0]
    cum = initial.total - s
    if sigma > 0:
        rng = as_seed(seed).generator()
        cum = cum * (1 + sigma * rng.standard_normal(cum.size))
    return Trajectory(grid, cum, "synthetic")


# -- control projection -------------------------------------------------------------


@dataclass(frozen=True)
class ControlScenario:
    base: EpidemicParameters
    reduction: float = 0.60
    intervention_time: float = 7.0
    horizon: float = 150.0

    def __post_init__(self):
        # 0 is the uncontrolled baseline, 1 stops transmission
        if not 0 <= self.reduction <= 1:
            raise ValueError("reduction must lie in [0, 1]")
        if not 0 <= self.intervention_time <= self.horizon:
            raise ValueError("intervention time must lie within the horizon")


def controlled_path(alpha: float, beta: float, initial: StateVector, scenario: ControlScenario,
                    step: float = DEFAULT_STEP) -> tuple[np.ndarray, np.ndarray]:
    """(times, states) with beta scaled by (1 - reduction) from the intervention on."""
    pop = scenario.base.population
    p1 = EpidemicParameters(alpha, beta, pop)
    before = integrate_dense(p1, initial, 0.0, scenario.intervention_time, step)
    s, i, r = before.states[-1]
    mid = StateVector(float(s), float(i), float(r))
    p2 = EpidemicParameters(alpha, beta * (1 - scenario.reduction), pop)
    after = integrate_dense(p2, mid, float(before.times[-1]), scenario.horizon, step)
    times = np.concatenate([before.times, after.times[1:]])
    states = np.vstack([before.states, after.states[1:]])
    return times, states


@dataclass
class ControlProjection:
    finals: np.ndarray
    uncontrolled: np.ndarray
    pairs: np.ndarray
    excluded: int
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def spread_ratio(self) -> float:
        return float(self.finals.max() / self.finals.min())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "alpha", "beta", "final_uncontrolled", "final_controlled"])
            for k, ((a, b), u, c) in enumerate(zip(self.pairs, self.uncontrolled, self.finals)):
                w.writerow([k, repr(float(a)), repr(float(b)), repr(float(u)), repr(float(c))])

    def write_histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.bin_edges, self.bin_edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def project_control(cloud, scenario: ControlScenario, initial: StateVector | None = None,
                    bins: int = 10, step: float = DEFAULT_STEP) -> ControlProjection:
    """Final cumulative incidence at the horizon for each pair, with and without control."""
    pairs = np.atleast_2d(np.asarray(cloud, float))
    if pairs.size == 0:
        raise ValueError("cloud is empty")
    pop = scenario.base.population
    if initial is None:
        initial = StateVector(pop - 1.0, 1.0, 0.0)
    finals, unc, kept = [], [], []
    excluded = 0
    for a, b in pairs:
        try:
            _, st = controlled_path(a, b, initial, scenario, step)
            base = integrate_dense(EpidemicParameters(a, b, pop), initial, 0.0,
                                   scenario.horizon, step)
        except Exception:  # noqa: BLE001  integration failure of one member
            excluded += 1
            continue
        finals.append(pop - st[-1, 0])
        unc.append(pop - base.states[-1, 0])
        kept.append((a, b))
    finals = np.array(finals)
    counts, edges = np.histogram(finals, bins=bins)
    return ControlProjection(finals, np.array(unc), np.array(kept), excluded, edges, counts)


# -- registration -------------------------------------------------------------------


@dataclass
class RegistrationResult:
    aligned: np.ndarray  # runs x grid, NaN outside each run's shifted support
    shifts: np.ndarray  # added to each run's time axis
    registered_mean: Trajectory
    unaligned_mean: Trajectory
    rmse_registered: float
    rmse_unaligned: float
    skipped: int
    window: np.ndarray = field(repr=False, default=None)

    def write_csv(self, path, ode: Trajectory) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "ode", "registered_mean", "unaligned_mean"])
            for t, o, r, u in zip(ode.times, ode.prevalence, self.registered_mean.prevalence,
                                  self.unaligned_mean.prevalence):
                w.writerow([f"{t:.6f}", repr(float(o)), repr(float(r)), repr(float(u))])


def register_at_peak(ensemble: Ensemble | np.ndarray, ode: Trajectory,
                     min_runs: int = 10) -> RegistrationResult:
    """Shift each took-off run in time so its smoothed peak sits on the ODE peak.

    Shifted runs are read back on the grid by linear interpolation; grid points
    outside a run's shifted span are left out of the mean.  RMSE is taken over
    grid points covered by every aligned run.
    """
    if isinstance(ensemble, Ensemble):
        took = ensemble.took_off()
        values = ensemble.values[took]
        skipped = int((~took).sum())
    else:
        values = np.atleast_2d(np.asarray(ensemble, float))
        skipped = 0
    if values.shape[0] < min_runs:
        raise ValueError(f"need at least {min_runs} took-off runs, got {values.shape[0]}")
    t = ode.times
    # the reference gets the same smoothing as the runs, so an exact copy has shift 0
    t_ref, _ = _refined_peak(t, smooth(ode.prevalence))
    aligned = np.full(values.shape, np.nan)
    shifts = np.empty(values.shape[0])
    for k, v in enumerate(values):
        t_run, _ = _refined_peak(t, smooth(v))
        d = t_ref - t_run
        shifts[k] = d
        inside = (t >= t[0] + d - 1e-12) & (t <= t[-1] + d + 1e-12)
        aligned[k, inside] = np.interp(t[inside] - d, t, v)
    covered = np.all(np.isfinite(aligned), axis=0)
    with np.errstate(invalid="ignore"):
        reg = np.nanmean(np.where(np.isfinite(aligned), aligned, np.nan), axis=0)
    reg = np.where(np.isfinite(reg), reg, 0.0)
    unal = values.mean(axis=0)
    ref = ode.prevalence
    if not covered.any():
        raise ValueError("aligned runs share no common window")
    rmse_r = float(np.sqrt(np.mean((reg[covered] - ref[covered]) ** 2)))
    rmse_u = float(np.sqrt(np.mean((unal[covered] - ref[covered]) ** 2)))
    return RegistrationResult(aligned, shifts, ode.with_values(reg), ode.with_values(unal),
                              rmse_r, rmse_u, skipped, covered)
