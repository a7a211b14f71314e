"""Synthetic prevalence data.

Four ways to turn a deterministic trajectory into noisy datasets:

* gaussian: ``y = I * (1 + eps)``, eps ~ N(0, sigma**2) independently per day;
* empirical: eps resampled from CTMC residuals of the same
  (prevalence bin, phase) stratum;
* hybrid: ``y(t) = a * I(t + dt)`` with one (a, dt) pair per dataset drawn from
  a KDE of pairs extracted from CTMC runs;
* ctmc: plain Gillespie runs (see :mod:`epiident.ctmc`).

Warp sign convention: ``dt = (ODE peak time) - (CTMC peak time)``, so the
warped ODE peaks where the CTMC run peaks.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ctmc import TAKEOFF_MIN_INFECTIONS, Ensemble
from .kde import ProductKDE
from .rng import RngSeed, as_seed
from .sir import NoPeakError, Trajectory, peak_of

__all__ = [
    "NoiseSpec",
    "NoTakeoffError",
    "ResidualBank",
    "WarpDistribution",
    "WarpSample",
    "build_residual_bank",
    "empirical_dataset",
    "extract_warp",
    "fit_warp_distribution",
    "gaussian_dataset",
    "hybrid_dataset",
    "phase_of",
    "scaled_residuals",
    "smooth",
    "warp_statistics",
]

# grid points with I_ODE below this are left out of residual analyses
MIN_PREVALENCE = 1.0
SMOOTHING_WINDOW = 3
MIN_WARP_SAMPLES = 10


class NoTakeoffError(ValueError):
    """The stochastic run died out before producing an epidemic."""


def phase_of(t, peak_time: float):
    """'pre' strictly before the peak, 'post' from the peak on."""
    if np.ndim(t) == 0:
        return "pre" if t < peak_time else "post"
    return np.where(np.asarray(t) < peak_time, "pre", "post")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")


def gaussian_values(prevalence: np.ndarray, sigma: float, rng: np.random.Generator,
                    count: int | None = None, clamp: bool = True) -> np.ndarray:
    """I * (1 + eps), clamped at 0 unless `clamp` is False.

    Clamping only matters once sigma is large enough for eps < -1 to be
    common; it then biases the data upward.
    """
    shape = prevalence.shape if count is None else (count, prevalence.size)
    eps = rng.standard_normal(shape) * sigma
    y = prevalence * (1.0 + eps)
    return np.maximum(y, 0.0) if clamp else y


def gaussian_dataset(ode: Trajectory, noise: NoiseSpec, seed: RngSeed | int) -> Trajectory:
    if noise.sigma == 0:
        return ode.with_values(ode.prevalence.copy())
    return ode.with_values(gaussian_values(ode.prevalence, noise.sigma, as_seed(seed).generator()))


# -- empirical residual resampling ------------------------------------------------


def scaled_residuals(values: np.ndarray, ode: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """(CTMC - I)/I on the grid points where I_ODE >= 1.

    Returns the residual matrix (runs x kept points) and the kept mask.
    """
    keep = ode.prevalence >= MIN_PREVALENCE
    ref = ode.prevalence[keep]
    return (np.atleast_2d(values)[:, keep] - ref) / ref, keep


@dataclass
class ResidualBank:
    """Scaled CTMC residuals stratified by (ODE prevalence bin, phase).

    ``bin_edges`` are the equal-mass bin boundaries of the ODE prevalence
    values (persons).  Strata left empty at construction are routed to the
    nearest non-empty bin of the same phase through ``aliases``.
    """

    strata: dict[tuple[int, str], np.ndarray]
    bin_edges: np.ndarray
    scenario: str = ""
    aliases: dict[tuple[int, str], tuple[int, str]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_bins(self) -> int:
        return self.bin_edges.size - 1

    def bin_index(self, prevalence) -> np.ndarray:
        idx = np.searchsorted(self.bin_edges, prevalence, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def stratum(self, bin_index: int, phase: str) -> np.ndarray:
        key = (int(bin_index), phase)
        return self.strata[self.aliases.get(key, key)]

    def resolve_aliases(self) -> None:
        """Route every (bin, phase) cell to a non-empty stratum."""
        self.aliases = {}
        for phase in ("pre", "post"):
            own = sorted(b for (b, p) in self.strata if p == phase)
            other = sorted(b for (b, p) in self.strata if p != phase)
            for b in range(self.n_bins):
                if (b, phase) in self.strata:
                    continue
                if own:
                    target = (min(own, key=lambda x: (abs(x - b), x)), phase)
                else:
                    alt = "post" if phase == "pre" else "pre"
                    target = (min(other, key=lambda x: (abs(x - b), x)), alt)
                self.aliases[(b, phase)] = target
                self.warnings.append(f"empty stratum ({b}, {phase}) merged into {target}")

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_index", "phase", "residual"])
            for (b, p) in sorted(self.strata):
                for v in self.strata[(b, p)]:
                    w.writerow([b, p, repr(float(v))])
        meta = {"bin_edges": [float(x) for x in self.bin_edges], "scenario": self.scenario}
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path, json_path) -> ResidualBank:
        with open(json_path) as fh:
            meta = json.load(fh)
        cells: dict[tuple[int, str], list[float]] = {}
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                cells.setdefault((int(row["bin_index"]), row["phase"]), []).append(float(row["residual"]))
        bank = cls({k: np.array(v) for k, v in cells.items()},
                   np.array(meta["bin_edges"], dtype=float), meta.get("scenario", ""))
        bank.resolve_aliases()
        bank.warnings = []
        return bank


def _equal_mass_edges(values: np.ndarray, bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, bins + 1)))
    if edges.size < 2:
        edges = np.array([edges[0], edges[0] + 1.0])
    return edges


def build_residual_bank(ensemble: Ensemble, ode: Trajectory, bins: int = 10,
                        scenario: str = "") -> ResidualBank:
    """Stratify the ensemble's scaled residuals by ODE prevalence bin and phase."""
    if ensemble.grid != ode.grid:
        raise ValueError("ensemble and ODE trajectory must share the grid")
    if bins < 1:
        raise ValueError("bins must be positive")
    res, keep = scaled_residuals(ensemble.values, ode)
    if not keep.any():
        raise ValueError("the ODE prevalence never reaches one person")
    peak_t, _ = peak_of(ode)
    prev = ode.prevalence[keep]
    phases = phase_of(ode.times[keep], peak_t)
    edges = _equal_mass_edges(prev, bins)
    bank = ResidualBank({}, edges, scenario)
    b_idx = bank.bin_index(prev)
    for b in range(bank.n_bins):
        for phase in ("pre", "post"):
            cols = (b_idx == b) & (phases == phase)
            if cols.any():
                bank.strata[(b, phase)] = res[:, cols].ravel()
    bank.resolve_aliases()
    return bank


def empirical_values(ode: Trajectory, bank: ResidualBank, rng: np.random.Generator,
                     count: int = 1) -> np.ndarray:
    out = np.tile(ode.prevalence, (count, 1))
    keep = ode.prevalence >= MIN_PREVALENCE
    if not keep.any():
        return out
    peak_t, _ = peak_of(ode)
    cols = np.flatnonzero(keep)
    bins = bank.bin_index(ode.prevalence[cols])
    phases = phase_of(ode.times[cols], peak_t)
    for c, b, ph in zip(cols, bins, phases):
        pool = bank.stratum(b, ph)
        eps = pool[rng.integers(0, pool.size, size=count)]
        out[:, c] = ode.prevalence[c] * (1.0 + eps)
    return out


def empirical_dataset(ode: Trajectory, bank: ResidualBank, seed: RngSeed | int) -> Trajectory:
    return ode.with_values(empirical_values(ode, bank, as_seed(seed).generator())[0])


# -- hybrid time/amplitude warping --------------------------------------------------


@dataclass(frozen=True)
class WarpSample:
    amplitude: float
    shift: float

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("amplitude must be positive")


def smooth(values: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centred moving average; the window is truncated at the series ends."""
    if window <= 1:
        return np.asarray(values, dtype=float)
    kernel = np.ones(window)
    total = np.convolve(values, kernel, mode="same")
    counts = np.convolve(np.ones_like(values, dtype=float), kernel, mode="same")
    return total / counts


def _refined_peak(times: np.ndarray, values: np.ndarray) -> tuple[float, float]:
    """Vertex of the parabola through the grid maximum and its neighbours."""
    k = int(np.argmax(values))
    if values[k] <= 0:
        raise NoPeakError("trajectory is identically zero")
    if 0 < k < values.size - 1:
        y0, y1, y2 = values[k - 1], values[k], values[k + 1]
        denom = y0 - 2.0 * y1 + y2
        if denom < 0:
            h = times[k + 1] - times[k]
            off = 0.5 * (y0 - y2) / denom
            return float(times[k] + off * h), float(y1 - 0.25 * (y0 - y2) * off)
    return float(times[k]), float(values[k])


def extract_warp(ctmc: Trajectory, ode: Trajectory, final_size: int | None = None) -> WarpSample:
    """(a, dt) such that ``a * I_ODE(t + dt)`` peaks where and as high as the run.

    Both curves get the same 3-day moving average before their peaks are
    located (with parabolic sub-day refinement).
    """
    if ctmc.grid != ode.grid:
        raise ValueError("trajectories must share the grid")
    if final_size is not None and final_size < TAKEOFF_MIN_INFECTIONS:
        raise NoTakeoffError(f"run infected only {final_size} people")
    if not np.any(ctmc.prevalence > 0):
        raise NoTakeoffError("run has no positive prevalence")
    t_run, h_run = _refined_peak(ctmc.times, smooth(ctmc.prevalence))
    t_ode, h_ode = _refined_peak(ode.times, smooth(ode.prevalence))
    return WarpSample(h_run / h_ode, t_ode - t_run)


def extract_warps(ensemble: Ensemble, ode: Trajectory, keep_no_takeoff: bool = False
                  ) -> tuple[list[WarpSample], int]:
    """Warp pairs of every run that took off; also returns the skipped count."""
    samples = []
    skipped = 0
    for row, inf in zip(ensemble.values, ensemble.infections):
        size = int(inf + row[0])
        try:
            samples.append(extract_warp(Trajectory(ensemble.grid, row, "ctmc"), ode,
                                        None if keep_no_takeoff else size))
        except (NoTakeoffError, NoPeakError):
            skipped += 1
    return samples, skipped


@dataclass
class WarpDistribution:
    """Joint KDE of (a, dt) pairs; sampling rejects draws with a <= 0."""

    samples: np.ndarray
    kde: ProductKDE

    @property
    def bandwidth(self) -> np.ndarray:
        return self.kde.bandwidth

    @property
    def warnings(self) -> list[str]:
        return self.kde.warnings

    def draw(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        out = np.empty((size, 2))
        filled = 0
        while filled < size:
            cand = self.kde.sample(rng, size - filled)
            cand = cand[cand[:, 0] > 0]
            out[filled:filled + len(cand)] = cand
            filled += len(cand)
        return out

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "dt"])
            for a, dt in self.samples:
                w.writerow([repr(float(a)), repr(float(dt))])
        meta = {
            "bandwidth": [float(x) for x in self.kde.bandwidth],
            "mean": [float(x) for x in self.kde.mean],
            "scale": [float(x) for x in self.kde.scale],
            "sign_convention": "dt = ode_peak_time - run_peak_time; y(t) = a * I_ode(t + dt)",
        }
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, csv_path, json_path) -> WarpDistribution:
        with open(csv_path, newline="") as fh:
            rows = [(float(r["a"]), float(r["dt"])) for r in csv.DictReader(fh)]
        with open(json_path) as fh:
            meta = json.load(fh)
        samples = np.array(rows)
        kde = ProductKDE(
            (samples - np.array(meta["mean"])) / np.array(meta["scale"]),
            np.array(meta["mean"]),
            np.array(meta["scale"]),
            np.array(meta["bandwidth"]),
        )
        return cls(samples, kde)


def fit_warp_distribution(samples) -> WarpDistribution:
    if len(samples) and isinstance(samples[0], WarpSample):
        arr = np.array([(s.amplitude, s.shift) for s in samples], dtype=float)
    else:
        arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < MIN_WARP_SAMPLES:
        raise ValueError(f"need at least {MIN_WARP_SAMPLES} warp samples")
    return WarpDistribution(arr, ProductKDE.fit(arr))


def warp_values(ode: Trajectory, warps: np.ndarray) -> np.ndarray:
    """``a * I_ODE(t + dt)`` for each (a, dt) row, by linear interpolation.

    Uses the dense integrator output when the trajectory carries it; shifted
    times outside the integration span take the endpoint value.
    """
    if ode.dense is not None:
        xs, ys = ode.dense.times, ode.dense.states[:, 1]
    else:
        xs, ys = ode.times, ode.prevalence
    warps = np.atleast_2d(warps)
    shifted = ode.times[None, :] + warps[:, 1:2]
    return warps[:, 0:1] * np.interp(shifted, xs, ys)


def hybrid_values(ode: Trajectory, warp: WarpDistribution, rng: np.random.Generator,
                  count: int = 1) -> np.ndarray:
    if ode.prevalence.size < 2:
        raise ValueError("the ODE trajectory needs at least two grid points")
    return warp_values(ode, warp.draw(rng, count))


def hybrid_dataset(ode: Trajectory, warp: WarpDistribution, seed: RngSeed | int) -> Trajectory:
    return ode.with_values(hybrid_values(ode, warp, as_seed(seed).generator())[0])


# -- warp statistics across scenarios -----------------------------------------------


@dataclass
class WarpStatRow:
    label: str
    r0: float
    population: int
    runs: int
    took_off: int
    mean_a: float
    sd_a: float
    mean_dt: float
    sd_dt: float

    @property
    def missing(self) -> bool:
        return math.isnan(self.mean_a)


def warp_statistics(scenarios, populations, runs: int = 500, seed=None,
                    threads: int = 1) -> list[WarpStatRow]:
    """Empirical mean/s.d. of a and dt from CTMC runs for every (scenario, N) cell.

    Each scenario's beta is rescaled so its R0 is unchanged at the other
    population sizes.  Cells with fewer than 10 take-off runs are reported
    with NaN moments.
    """
    from .ctmc import run_ensemble
    from .scenarios import make_scenario
    from .sir import integrate_sir

    seed = as_seed(seed)
    rows = []
    for si, sc in enumerate(scenarios):
        for ni, n in enumerate(populations):
            beta = sc.params.beta * sc.params.population / n
            cell = make_scenario(sc.params.alpha, beta, n, int(sc.initial.infectious), sc.grid.t_end)
            ode = integrate_sir(cell.params, cell.initial, cell.grid)
            ens = run_ensemble(cell.params, cell.initial, cell.grid, runs,
                               RngSeed(seed.master, ((si + 1) << 40) + (ni << 32)), threads)
            warps, _ = extract_warps(ens, ode)
            if len(warps) < MIN_WARP_SAMPLES:
                nan = float("nan")
                rows.append(WarpStatRow(cell.label, cell.r0, n, runs, len(warps), nan, nan, nan, nan))
                continue
            arr = np.array([(w.amplitude, w.shift) for w in warps])
            rows.append(WarpStatRow(
                cell.label, cell.r0, n, runs, len(warps),
                float(arr[:, 0].mean()), float(arr[:, 0].std(ddof=1)),
                float(arr[:, 1].mean()), float(arr[:, 1].std(ddof=1)),
            ))
    return rows
