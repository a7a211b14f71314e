"""Exact SIR continuous-time Markov chain (Gillespie direct method)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numba
import numpy as np

from .rng import RngSeed, as_seed, generator_version
from .sir import EpidemicParameters, StateVector, TimeGrid, Trajectory

__all__ = [
    "INFECTION",
    "RECOVERY",
    "EventRecord",
    "Ensemble",
    "final_sizes",
    "gillespie_run",
    "run_ensemble",
    "sample_daily",
]

INFECTION = 0
RECOVERY = 1
# final size below this many infections counts as extinction before take-off
TAKEOFF_MIN_INFECTIONS = 10


@dataclass
class EventRecord:
    """Event log of one run, column-wise.

    ``states[k]`` is the (S, I, R) state right after event ``k``.
    """

    times: np.ndarray
    events: np.ndarray
    states: np.ndarray

    def __len__(self):
        return self.times.size


@numba.njit(cache=True)
def _gillespie(alpha, beta, s, i, r, t_end, uniforms):
    n_max = uniforms.size // 2
    times = np.empty(n_max)
    events = np.empty(n_max, dtype=np.int8)
    states = np.empty((n_max, 3), dtype=np.int64)
    t = 0.0
    n = 0
    while i > 0 and n < n_max:
        a1 = beta * s * i
        a2 = alpha * i
        total = a1 + a2
        # 1 - u lies in (0, 1]
        t += -np.log(1.0 - uniforms[2 * n]) / total
        if t >= t_end:
            break
        if uniforms[2 * n + 1] < a1 / total:
            s -= 1
            i += 1
            events[n] = 0
        else:
            i -= 1
            r += 1
            events[n] = 1
        times[n] = t
        states[n, 0] = s
        states[n, 1] = i
        states[n, 2] = r
        n += 1
    return times[:n], events[:n], states[:n]


def _int_state(initial: StateVector) -> tuple[int, int, int]:
    vals = initial.as_tuple()
    ints = tuple(int(round(v)) for v in vals)
    if any(abs(a - b) > 0 for a, b in zip(vals, ints)):
        raise ValueError(f"CTMC initial state must be integer valued: {initial}")
    return ints


def gillespie_run(
    params: EpidemicParameters,
    initial: StateVector,
    t_end: float,
    seed: RngSeed | int,
) -> EventRecord:
    """Simulate one CTMC path up to extinction of infection or `t_end`.

    Each step draws an Exp(a1 + a2) waiting time with a1 = beta*S*I,
    a2 = alpha*I, then picks infection if u < a1/(a1 + a2), recovery otherwise.
    """
    s, i, r = _int_state(initial)
    if s + i + r != params.population:
        raise ValueError("initial state does not sum to the population size")
    # every person is infected at most once and recovers at most once
    n_max = 2 * s + i
    uniforms = as_seed(seed).generator().random(2 * max(n_max, 1))
    times, events, states = _gillespie(
        float(params.alpha), float(params.beta), s, i, r, float(t_end), uniforms
    )
    return EventRecord(times, events, states)


def sample_daily(events: EventRecord, initial: StateVector, grid: TimeGrid) -> Trajectory:
    """Right-continuous step-function read-out of the prevalence on `grid`."""
    i0 = initial.infectious
    if len(events) == 0:
        return Trajectory(grid, np.full(len(grid), float(i0)), "ctmc")
    # index of the last event with time <= t
    k = np.searchsorted(events.times, grid.times, side="right") - 1
    prev = np.where(k >= 0, events.states[np.maximum(k, 0), 1], i0).astype(float)
    return Trajectory(grid, prev, "ctmc")


def _single(args):
    params, initial, grid, seed = args
    ev = gillespie_run(params, initial, grid.t_end, seed)
    traj = sample_daily(ev, initial, grid)
    infections = int(np.count_nonzero(ev.events == INFECTION))
    return traj.prevalence, infections


@dataclass
class Ensemble:
    """Daily-sampled CTMC runs; ``values[j]`` is run j's prevalence."""

    grid: TimeGrid
    values: np.ndarray
    infections: np.ndarray
    params: EpidemicParameters | None = None
    seed: RngSeed | None = None

    def __len__(self):
        return self.values.shape[0]

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.grid, v, "ctmc") for v in self.values]

    def took_off(self, min_infections: int = TAKEOFF_MIN_INFECTIONS) -> np.ndarray:
        """Mask of runs whose final size (initial cases included) reaches `min_infections`."""
        i0 = self.values[:, 0] if self.values.size else np.zeros(0)
        return self.infections + i0 >= min_infections

    def filtered(self, min_infections: int = TAKEOFF_MIN_INFECTIONS) -> Ensemble:
        keep = self.took_off(min_infections)
        return Ensemble(self.grid, self.values[keep], self.infections[keep], self.params, self.seed)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_id", "t", "I"])
            for j, row in enumerate(self.values):
                for t, v in zip(self.grid.times, row):
                    w.writerow([j, f"{t:.6f}", int(v)])

    def manifest(self) -> dict:
        out = {"count": len(self), "generator": generator_version()}
        if self.params is not None:
            out["params"] = {
                "alpha": self.params.alpha,
                "beta": self.params.beta,
                "population": self.params.population,
            }
        if self.seed is not None:
            out["seed"] = {"master": self.seed.master, "stream": self.seed.stream}
        return out

    def write(self, csv_path, manifest_path) -> None:
        self.write_csv(csv_path)
        with open(manifest_path, "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_ensemble(
    params: EpidemicParameters,
    initial: StateVector,
    grid: TimeGrid,
    count: int,
    seed: RngSeed | int,
    threads: int = 1,
) -> Ensemble:
    """`count` independent runs; run j uses stream ``seed.stream + j``."""
    from .parallel import parallel_map

    if count < 1:
        raise ValueError("count must be at least 1")
    seed = as_seed(seed)
    jobs = [(params, initial, grid, seed.child(j)) for j in range(count)]
    results = parallel_map(_single, jobs, threads)
    values = np.array([r[0] for r in results])
    infections = np.array([r[1] for r in results], dtype=np.int64)
    return Ensemble(grid, values, infections, params, seed)


def final_sizes(ensemble: Ensemble) -> np.ndarray:
    """Total number ever infected per run, initial cases included."""
    return ensemble.infections + ensemble.values[:, 0]
