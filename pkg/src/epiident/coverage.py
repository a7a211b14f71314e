"""Coverage of joint confidence regions built from Monte Carlo fits.

For one scenario and one data-generating method:

1. J CTMC realizations from the true (alpha, beta)  (the "truth" layer);
2. fit each one -> (alpha_j, beta_j);
3. generate M datasets from (alpha_j, beta_j) with the method;
4. fit each of them;
5. KDE highest-density region at the requested level from the M estimates;
6. check whether the true pair is inside.

Coverage is the fraction of the J trials whose region holds the truth.

Random streams: truth realizations use keys (scenario, TRUTH, j) and are
shared by all methods of a run; inner datasets use (scenario, method, j);
reference ensembles for the empirical/hybrid generators use
(scenario, REFERENCE).  Any single cell can be recomputed alone.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ctmc import Ensemble, gillespie_run, sample_daily
from .estimate import FitConfig, default_config, fit_batch
from .kde import ProductKDE
from .rng import RngSeed, label_key, stream_rng
from .scenarios import Scenario
from .sir import integrate_sir
from .synth import (
    ResidualBank,
    WarpDistribution,
    build_residual_bank,
    empirical_values,
    extract_warps,
    fit_warp_distribution,
    gaussian_values,
    hybrid_values,
)

__all__ = [
    "ConfidenceRegion",
    "CoverageConfig",
    "CoverageReport",
    "Generators",
    "Method",
    "coverage_table",
    "ctmc_ensemble",
    "generate_datasets",
    "kde_region",
    "reference_generators",
    "run_coverage",
    "sigma_min_search",
]

_TRUTH = 1
_REFERENCE = 2
_INNER = 3

MAX_EXCLUDED_FRACTION = 0.2
MIN_CLOUD = 50


@dataclass(frozen=True)
class Method:
    kind: str
    sigma: float = 0.0
    # gaussian only: False lets I * (1 + eps) go negative
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in ("ctmc", "gaussian", "empirical", "hybrid"):
            raise ValueError(f"unknown method {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma >= 0:
            raise ValueError("gaussian sigma must be non-negative")

    @classmethod
    def parse(cls, text: str) -> Method:
        text = text.strip()
        if text.startswith("gaussian"):
            name, _, sigma = text.partition(":")
            if name not in ("gaussian", "gaussian_unclamped"):
                raise ValueError(f"unknown method {name!r}")
            return cls("gaussian", float(sigma) if sigma else 0.1, name == "gaussian")
        return cls(text)

    @property
    def label(self) -> str:
        if self.kind != "gaussian":
            return self.kind
        return f"gaussian{'' if self.clamp else '_unclamped'}:{self.sigma:g}"

    @property
    def key(self) -> int:
        return label_key(self.label)


@dataclass(frozen=True)
class CoverageConfig:
    j_outer: int = 30
    m_inner: int = 300
    level: float = 0.68
    method: Method = Method("ctmc")
    seed: int = 0
    reference_runs: int = 1000
    residual_bins: int = 10
    # "ctmc": truth realizations are CTMC for every method; "method": they come
    # from the method under test
    truth: str = "ctmc"
    keep_extinct: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.j_outer < 2:
            raise ValueError("j_outer must be at least 2")
        if self.m_inner < MIN_CLOUD:
            raise ValueError(f"m_inner must be at least {MIN_CLOUD}")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.truth not in ("ctmc", "method"):
            raise ValueError("truth must be 'ctmc' or 'method'")


@dataclass
class ConfidenceRegion:
    """Highest-density region: points whose KDE density reaches `threshold`."""

    kde: ProductKDE
    threshold: float
    level: float
    sample_density: np.ndarray

    @property
    def bandwidth(self) -> np.ndarray:
        return self.kde.bandwidth

    def density(self, point) -> np.ndarray:
        return self.kde.density(point)

    def contains(self, point) -> bool | np.ndarray:
        d = self.kde.density(point)
        inside = d >= self.threshold
        return bool(inside[0]) if np.ndim(point) == 1 else inside

    def member_fraction(self) -> float:
        return float(np.mean(self.sample_density >= self.threshold))


def kde_region(estimates, level: float) -> ConfidenceRegion:
    """HDR from a cloud of estimates.

    The threshold is the order statistic of the cloud's own densities that
    leaves a fraction `level` (rounded up to the next 1/M) of the points on or
    above it.
    """
    pts = np.asarray(estimates, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < MIN_CLOUD:
        raise ValueError(f"need at least {MIN_CLOUD} estimates")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    kde = ProductKDE.fit(pts)
    dens = kde.density_standardized(kde.points)
    m = dens.size
    k = min(int(math.floor((1.0 - level) * m + 1e-9)), m - 1)
    threshold = float(np.sort(dens)[k])
    return ConfidenceRegion(kde, threshold, level, dens)


@dataclass
class CoverageReport:
    scenario: str
    method: str
    coverage: float
    j_outer: int
    m_inner: int
    level: float
    membership: list[bool] = field(default_factory=list)
    excluded: int = 0
    extinct_truth: int = 0
    inner_failures: int = 0
    failed: bool = False
    message: str = ""

    def as_row(self) -> dict:
        return {
            "scenario": self.scenario,
            "method": self.method,
            "coverage": self.coverage,
            "j_used": len(self.membership),
            "j_outer": self.j_outer,
            "m_inner": self.m_inner,
            "level": self.level,
            "excluded": self.excluded,
            "extinct_truth": self.extinct_truth,
            "inner_failures": self.inner_failures,
        }


# -- data generation -----------------------------------------------------------------


@dataclass
class Generators:
    """Per-scenario reference material for the empirical and hybrid methods."""

    bank: ResidualBank | None = None
    warp: WarpDistribution | None = None


def reference_generators(scenario: Scenario, config: CoverageConfig, need: set[str],
                         scenario_key: int) -> Generators:
    gens = Generators()
    if not need & {"empirical", "hybrid"}:
        return gens
    ode = integrate_sir(scenario.params, scenario.initial, scenario.grid)
    ens = ctmc_ensemble(scenario, scenario.params.alpha, scenario.params.beta,
                       config.reference_runs, stream_rng(config.seed, scenario_key, _REFERENCE))
    if not config.keep_extinct:
        ens = ens.filtered()
    if "empirical" in need:
        gens.bank = build_residual_bank(ens, ode, config.residual_bins, scenario.label)
    if "hybrid" in need:
        warps, _ = extract_warps(ens, ode)
        gens.warp = fit_warp_distribution(warps)
    return gens


def ctmc_ensemble(scenario: Scenario, alpha: float, beta: float, count: int,
                  rng: np.random.Generator) -> Ensemble:
    """`count` CTMC runs drawing all randomness from one generator, in order."""
    params = scenario.params.with_rates(alpha, beta)
    values = np.empty((count, len(scenario.grid)))
    infections = np.empty(count, dtype=np.int64)
    for k in range(count):
        seed = int(rng.integers(0, 2**63))
        ev = gillespie_run(params, scenario.initial, scenario.grid.t_end, RngSeed(seed))
        values[k] = sample_daily(ev, scenario.initial, scenario.grid).prevalence
        infections[k] = int(np.count_nonzero(ev.events == 0))
    return Ensemble(scenario.grid, values, infections, params)


def generate_datasets(method: Method, scenario: Scenario, alpha: float, beta: float,
                      count: int, rng: np.random.Generator, gens: Generators,
                      keep_extinct: bool = True) -> np.ndarray:
    """`count` datasets (rows) from `method` at (alpha, beta)."""
    if method.kind == "ctmc":
        ens = ctmc_ensemble(scenario, alpha, beta, count, rng)
        if keep_extinct:
            return ens.values
        # redraw extinct runs so the cloud keeps its size
        vals = ens.values[ens.took_off()]
        tries = 0
        while vals.shape[0] < count and tries < 50:
            more = ctmc_ensemble(scenario, alpha, beta, count - vals.shape[0], rng)
            vals = np.vstack([vals, more.values[more.took_off()]])
            tries += 1
        return vals
    ode = integrate_sir(scenario.params.with_rates(alpha, beta), scenario.initial, scenario.grid)
    if method.kind == "gaussian":
        return gaussian_values(ode.prevalence, method.sigma, rng, count, method.clamp)
    if method.kind == "empirical":
        return empirical_values(ode, gens.bank, rng, count)
    return hybrid_values(ode, gens.warp, rng, count)


# -- protocol ------------------------------------------------------------------------


def _truth_layer(scenario: Scenario, config: CoverageConfig, scenario_key: int,
                 gens: Generators):
    """J truth realizations (rows) and a mask of the ones that took off."""
    a, b = scenario.params.alpha, scenario.params.beta
    rows = []
    took = []
    for j in range(config.j_outer):
        rng = stream_rng(config.seed, scenario_key, _TRUTH, j)
        if config.truth == "ctmc" or config.method.kind == "ctmc":
            ens = ctmc_ensemble(scenario, a, b, 1, rng)
            rows.append(ens.values[0])
            took.append(bool(ens.took_off()[0]))
        else:
            rows.append(generate_datasets(config.method, scenario, a, b, 1, rng, gens)[0])
            took.append(True)
    return np.array(rows), np.array(took)


def _trial(scenario: Scenario, config: CoverageConfig, fit_cfg: FitConfig, gens: Generators,
           scenario_key: int, j: int, alpha_j: float, beta_j: float):
    """Steps 3-6 for one truth trial; returns (inside, inner failures) or None."""
    rng = stream_rng(config.seed, scenario_key, _INNER, config.method.key, j)
    data = generate_datasets(config.method, scenario, alpha_j, beta_j, config.m_inner, rng, gens,
                             keep_extinct=config.keep_extinct)
    if data.shape[0] < MIN_CLOUD:
        return None
    fits = fit_batch(data, scenario.grid, fit_cfg.around(alpha_j, beta_j),
                     allow_negative=not config.method.clamp)
    ok = np.isfinite(fits[:, 2])
    cloud = fits[ok, :2]
    if cloud.shape[0] < MIN_CLOUD:
        return None
    region = kde_region(cloud, config.level)
    truth = np.array([scenario.params.alpha, scenario.params.beta])
    return bool(region.contains(truth)), int((~ok).sum())


def _trial_job(args):
    return _trial(*args)


def run_coverage(scenario: Scenario, config: CoverageConfig, scenario_index: int = 0,
                 gens: Generators | None = None) -> CoverageReport:
    from .parallel import parallel_map

    skey = scenario_index
    if gens is None:
        gens = reference_generators(scenario, config, {config.method.kind}, skey)
    fit_cfg = default_config(scenario.params, scenario.initial)
    truth_rows, took = _truth_layer(scenario, config, skey, gens)
    report = CoverageReport(scenario.label, config.method.label, float("nan"),
                            config.j_outer, config.m_inner, config.level)
    use = np.ones(config.j_outer, dtype=bool)
    if not config.keep_extinct:
        use = took
        report.extinct_truth = int((~took).sum())
    outer = fit_batch(truth_rows, scenario.grid, fit_cfg, allow_negative=not config.method.clamp)
    jobs = []
    for j in range(config.j_outer):
        if not use[j]:
            continue
        if not np.isfinite(outer[j, 2]):
            report.excluded += 1
            continue
        jobs.append((scenario, config, fit_cfg, gens, skey, j, outer[j, 0], outer[j, 1]))
    results = parallel_map(_trial_job, jobs, config.threads)
    for res in results:
        if res is None:
            report.excluded += 1
            continue
        inside, fails = res
        report.membership.append(inside)
        report.inner_failures += fails
    n_used = int(use.sum())
    if not report.membership or report.excluded > MAX_EXCLUDED_FRACTION * max(n_used, 1):
        report.failed = True
        report.message = f"{report.excluded} of {n_used} trials excluded"
    if report.membership:
        report.coverage = float(np.mean(report.membership))
    return report


def coverage_table(scenarios: list[Scenario], methods: list[Method], config: CoverageConfig,
                   scenario_indices: list[int] | None = None) -> list[list[CoverageReport | None]]:
    """Reports for every (scenario, method) cell; failed cells are None.

    `scenario_indices` fixes each scenario's stream key (its position in the
    full 16-scenario grid) so a subset run reproduces the full-run cells.
    """
    idx = scenario_indices or list(range(len(scenarios)))
    table = []
    for sc, si in zip(scenarios, idx):
        gens = reference_generators(sc, config, {m.kind for m in methods}, si)
        row = []
        for m in methods:
            rep = run_coverage(sc, replace(config, method=m), si, gens)
            row.append(None if rep.failed else rep)
        table.append(row)
    return table


def within_nominal(coverage: float, level: float, band: float = 0.10) -> bool:
    return abs(coverage - level) <= band + 1e-12


def write_coverage_csv(table, scenarios, methods, path, level: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "R0", "label"]
                   + [m.label for m in methods] + [f"{m.label}_within_10pct" for m in methods])
        for sc, row in zip(scenarios, table):
            cov = ["" if r is None else f"{r.coverage:.4f}" for r in row]
            flags = ["" if r is None else str(within_nominal(r.coverage, level)).lower() for r in row]
            w.writerow([repr(sc.params.alpha), repr(sc.params.beta), f"{sc.r0:.2f}", sc.label]
                       + cov + flags)


# -- sigma_min -----------------------------------------------------------------------


@dataclass
class SigmaSearch:
    sigma_min: float
    saturated: bool
    curve: list[tuple[float, float]]
    monotonicity_violations: list[tuple[float, float]] = field(default_factory=list)


def sigma_min_search(scenario: Scenario, target: float, config: CoverageConfig,
                     lo: float = 0.01, hi: float = 2.0, width: float = 0.05, slack: float = 0.03,
                     scenario_index: int = 0, clamp: bool = False) -> SigmaSearch:
    """Smallest Gaussian sigma whose coverage reaches `target`, by bisection.

    Stops when the bracket is narrower than `width` or a probe lands within
    `slack` of the target.  Coverage is assumed non-decreasing in sigma;
    drops of more than 0.05 between probes are reported.  The noise is not
    clamped by default: clamping at 0 biases the fits once sigma nears 1 and
    coverage then falls again, which breaks the bisection.
    """
    if not 0 <= target < 1:
        raise ValueError("target must lie in [0, 1)")
    curve: list[tuple[float, float]] = []

    def cov(sigma: float) -> float:
        rep = run_coverage(scenario, replace(config, method=Method("gaussian", sigma, clamp)),
                           scenario_index)
        curve.append((sigma, rep.coverage))
        return rep.coverage

    if target <= 0:
        return SigmaSearch(lo, False, curve)
    c_hi = cov(hi)
    if c_hi < target - slack:
        return SigmaSearch(hi, True, curve)
    c_lo = cov(lo)
    if c_lo >= target - slack:
        return SigmaSearch(lo, False, curve)
    a, b = lo, hi
    result = hi
    while b - a >= width:
        mid = 0.5 * (a + b)
        c = cov(mid)
        if abs(c - target) <= slack:
            result = mid
            break
        if c < target:
            a = mid
        else:
            b = mid
        result = b
    pts = sorted(curve)
    bad = [(s2, c2) for (s1, c1), (s2, c2) in zip(pts, pts[1:]) if c2 < c1 - 0.05]
    return SigmaSearch(result, False, curve, bad)


def write_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
