"""Monte Carlo practical identifiability: estimate clouds, ARE, CV and spread ellipses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .coverage import CoverageConfig, Method, generate_datasets, reference_generators
from .estimate import default_config, fit_batch
from .rng import stream_rng
from .scenarios import Scenario
from .synth import NoiseSpec

__all__ = [
    "DegenerateEllipseError",
    "Ellipse",
    "IdentifyConfig",
    "RuleInapplicableError",
    "SpreadSummary",
    "are",
    "coefficient_of_variation",
    "identifiability_verdict",
    "mc_identifiability",
    "spread_ellipse",
]

MIN_DATASETS = 50
MIN_ELLIPSE_POINTS = 10
_IDENTIFY = 4


class RuleInapplicableError(ValueError):
    pass


class DegenerateEllipseError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    axes: tuple[float, float]  # semi-axes, major first
    rotation: float  # radians, major axis against the first coordinate
    level: float
    radius2: float
    covariance: tuple[tuple[float, float], tuple[float, float]]

    def contains(self, points) -> np.ndarray:
        """Mahalanobis distance squared <= radius2."""
        p = np.atleast_2d(np.asarray(points, float)) - np.asarray(self.center)
        inv = np.linalg.inv(np.asarray(self.covariance))
        d2 = np.einsum("ij,jk,ik->i", p, inv, p)
        return d2 <= self.radius2


def spread_ellipse(estimates, level: float = 0.95) -> Ellipse:
    """Normal-theory ellipse from the sample mean and covariance of a 2-D cloud."""
    x = np.asarray(estimates, float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError("estimates must have shape (n, 2)")
    if x.shape[0] < MIN_ELLIPSE_POINTS:
        raise ValueError(f"need at least {MIN_ELLIPSE_POINTS} estimates")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    cov = np.cov(x, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    # relative test: a perfectly correlated cloud leaves round-off in the small eigenvalue
    if not evals[0] > 1e-12 * max(evals[1], 0.0):
        raise DegenerateEllipseError("sample covariance is singular")
    r2 = float(stats.chi2.ppf(level, 2))
    major = evecs[:, 1]
    return Ellipse(
        center=(float(x[:, 0].mean()), float(x[:, 1].mean())),
        axes=(math.sqrt(r2 * evals[1]), math.sqrt(r2 * evals[0])),
        rotation=math.atan2(major[1], major[0]),
        level=level,
        radius2=r2,
        covariance=((cov[0, 0], cov[0, 1]), (cov[1, 0], cov[1, 1])),
    )


def ellipse_outline(e: Ellipse, points: int = 200) -> np.ndarray:
    th = np.linspace(0, 2 * math.pi, points)
    c, s = math.cos(e.rotation), math.sin(e.rotation)
    u = e.axes[0] * np.cos(th)
    v = e.axes[1] * np.sin(th)
    return np.column_stack([e.center[0] + c * u - s * v, e.center[1] + s * u + c * v])


def coefficient_of_variation(values) -> float:
    """100 * sample s.d. (n - 1) / mean."""
    v = np.asarray(values, float)
    return float(100 * v.std(ddof=1) / v.mean())


def are(estimates, truth) -> np.ndarray:
    """Average relative estimation error in percent, per parameter.

    The error of each estimate is taken relative to the true value.
    """
    est = np.atleast_2d(np.asarray(estimates, float))
    t = np.asarray(truth, float)
    if est.shape[0] < 1:
        raise ValueError("need at least one estimate")
    if np.any(t == 0):
        raise ValueError("ARE is undefined for a true parameter of 0")
    return 100 * np.mean(np.abs(t - est) / np.abs(t), axis=0)


@dataclass
class SpreadSummary:
    method: str
    truth: tuple[float, float]
    mean: tuple[float, float]
    sd: tuple[float, float]
    cv: tuple[float, float]
    are: tuple[float, float]
    estimates: np.ndarray = field(repr=False)
    ellipse: Ellipse | None = None
    excluded: int = 0
    sigma: float | None = None

    def as_dict(self) -> dict:
        d = {
            "method": self.method,
            "alpha_true": self.truth[0], "beta_true": self.truth[1],
            "alpha_mean": self.mean[0], "beta_mean": self.mean[1],
            "alpha_sd": self.sd[0], "beta_sd": self.sd[1],
            "alpha_cv_percent": self.cv[0], "beta_cv_percent": self.cv[1],
            "alpha_are_percent": self.are[0], "beta_are_percent": self.are[1],
            "count": int(self.estimates.shape[0]),
            "excluded": self.excluded,
        }
        if self.ellipse is not None:
            d["ellipse"] = {
                "center": list(self.ellipse.center), "axes": list(self.ellipse.axes),
                "rotation": self.ellipse.rotation, "level": self.ellipse.level,
            }
        return d


def summarize(estimates, truth, method: str = "", sigma: float | None = None,
              excluded: int = 0, level: float = 0.95) -> SpreadSummary:
    est = np.asarray(estimates, float)
    mean = est.mean(axis=0)
    sd = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros(2)
    cv = 100 * sd / mean
    try:
        ell = spread_ellipse(est, level)
    except (DegenerateEllipseError, ValueError):
        ell = None
    a = are(est, truth)
    return SpreadSummary(method, (float(truth[0]), float(truth[1])),
                         (float(mean[0]), float(mean[1])), (float(sd[0]), float(sd[1])),
                         (float(cv[0]), float(cv[1])), (float(a[0]), float(a[1])),
                         est, ell, excluded, sigma)


def identifiability_verdict(summary: SpreadSummary, sigma: NoiseSpec | float | None = None
                            ) -> tuple[bool, bool]:
    """ARE < 100 sigma, per parameter; only defined for Gaussian-noise clouds."""
    if sigma is None:
        sigma = summary.sigma
    if isinstance(sigma, NoiseSpec):
        sigma = sigma.sigma
    if sigma is None or not summary.method.startswith("gaussian"):
        raise RuleInapplicableError("the ARE threshold rule is defined for Gaussian noise only")
    return (summary.are[0] < 100 * sigma, summary.are[1] < 100 * sigma)


@dataclass(frozen=True)
class IdentifyConfig:
    reference_runs: int = 1000
    residual_bins: int = 10
    keep_extinct: bool = False
    level: float = 0.95
    lanes: int = 16


def mc_identifiability(scenario: Scenario, method: Method | str, m: int, seed: int = 0,
                       config: IdentifyConfig = IdentifyConfig(), scenario_key: int = 0
                       ) -> SpreadSummary:
    """m datasets from the true trajectory by `method`, each fitted; spread summary.

    Fit failures are dropped and counted in `excluded`.
    """
    if isinstance(method, str):
        method = Method.parse(method)
    if m < MIN_DATASETS:
        raise ValueError(f"m must be at least {MIN_DATASETS}")
    ccfg = CoverageConfig(seed=seed, reference_runs=config.reference_runs,
                          residual_bins=config.residual_bins, keep_extinct=config.keep_extinct)
    gens = reference_generators(scenario, ccfg, {method.kind}, scenario_key)
    p = scenario.params
    rng = stream_rng(seed, scenario_key, _IDENTIFY, method.key)
    data = generate_datasets(method, scenario, p.alpha, p.beta, m, rng, gens,
                             keep_extinct=config.keep_extinct)
    fits = fit_batch(data, scenario.grid, default_config(p, scenario.initial),
                     lanes=config.lanes, allow_negative=not method.clamp)
    ok = np.isfinite(fits[:, 2])
    sigma = method.sigma if method.kind == "gaussian" else None
    return summarize(fits[ok, :2], (p.alpha, p.beta), method.label, sigma,
                     int((~ok).sum()) + m - data.shape[0], config.level)


def write_estimates(summary: SpreadSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "alpha_hat", "beta_hat"])
        for i, (a, b) in enumerate(summary.estimates):
            w.writerow([i, repr(float(a)), repr(float(b))])


def write_summary(summary: SpreadSummary, path) -> None:
    d = summary.as_dict()
    if summary.sigma is not None:
        v = identifiability_verdict(summary)
        d["identifiable"] = {"alpha": v[0], "beta": v[1]}
        d["sigma"] = summary.sigma
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")
