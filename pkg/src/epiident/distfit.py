"""Parametric fits to shifted residuals, AIC ranking and the Anderson-Darling test.

Residuals are bounded below by -1; they are shifted by +1 so that the
positive-support families apply.  Exact zeros after the shift (a run with no
infectious people where the ODE still has some) are nudged to 1e-9.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

__all__ = [
    "AD_CRITICAL_VALUES",
    "FAMILIES",
    "AdResult",
    "DegenerateSampleError",
    "DistFitFailure",
    "FitResult",
    "aic_rank",
    "aic_win_table",
    "ad_statistic",
    "anderson_darling_lognormal",
    "calibrate_ad",
    "fit_family",
    "shift_residuals",
]

FAMILIES = ("normal", "lognormal", "gamma", "weibull", "skewnormal")
N_PARAMS = {"normal": 2, "lognormal": 2, "gamma": 2, "weibull": 2, "skewnormal": 3}
NUDGE = 1e-9
MIN_FIT_SAMPLES = 20
MIN_AD_SAMPLES = 8
AIC_TIE = 1e-9
SKEW_BOUNDARY = 50.0

# Upper-tail points of the corrected statistic A2* = A2 (1 + 0.75/n + 2.25/n^2),
# normal distribution with mean and variance estimated from the sample.
AD_CRITICAL_VALUES = {0.10: 0.631, 0.05: 0.752, 0.025: 0.873, 0.01: 1.035}

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class DegenerateSampleError(ValueError):
    pass


class DistFitFailure(RuntimeError):
    pass


@dataclass
class FitResult:
    family: str
    params: tuple[float, ...]
    loglik: float
    k: int
    aic: float
    flags: tuple[str, ...] = ()

    @classmethod
    def make(cls, family: str, params, loglik: float, flags=()) -> FitResult:
        k = N_PARAMS[family]
        return cls(family, tuple(float(p) for p in params), float(loglik), k,
                   2 * k - 2 * float(loglik), tuple(flags))


def shift_residuals(residuals) -> tuple[np.ndarray, int]:
    """residual + 1, with exact zeros nudged to 1e-9; returns (values, nudges)."""
    r = np.asarray(residuals, dtype=float)
    if np.any(r < -1.0):
        raise ValueError("scaled residuals below -1 violate the lower bound")
    x = r + 1.0
    zero = x <= 0.0
    x[zero] = NUDGE
    return x, int(zero.sum())


def _normal_loglik(x, mu, sd):
    z = (x - mu) / sd
    return float(-x.size * (_LOG_SQRT_2PI + math.log(sd)) - 0.5 * np.dot(z, z))


def _fit_normal(x):
    mu = float(x.mean())
    sd = float(x.std())
    return FitResult.make("normal", (mu, sd), _normal_loglik(x, mu, sd))


def _fit_lognormal(x):
    lx = np.log(x)
    mu = float(lx.mean())
    s = float(lx.std())
    if not s > 0:
        raise DegenerateSampleError("log-samples have zero spread")
    return FitResult.make("lognormal", (mu, s), _normal_loglik(lx, mu, s) - float(lx.sum()))


def _fit_gamma(x):
    """Shape from Newton on log k - digamma(k) = log(mean) - mean(log x)."""
    lx = np.log(x)
    mean = float(x.mean())
    s = math.log(mean) - float(lx.mean())
    if not s > 0:
        raise DegenerateSampleError("gamma shape equation has no solution")
    k = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    for _ in range(100):
        f = math.log(k) - special.digamma(k) - s
        df = 1 / k - special.polygamma(1, k)
        step = f / df
        k_new = k - step
        if k_new <= 0:
            k_new = 0.5 * k
        if abs(k_new - k) < 1e-12 * k:
            k = k_new
            break
        k = k_new
    else:
        raise DistFitFailure("gamma shape iteration did not converge")
    theta = mean / k
    ll = ((k - 1) * lx.sum() - x.sum() / theta - x.size * (special.gammaln(k) + k * math.log(theta)))
    return FitResult.make("gamma", (k, theta), float(ll))


def _fit_weibull(x):
    """Shape from Newton on the profile equation, scale in closed form."""
    xs = x / x.max()
    lx = np.log(xs)
    mean_lx = float(lx.mean())
    sd = float(lx.std())
    if not sd > 0:
        raise DegenerateSampleError("log-samples have zero spread")
    c = 1.2 / sd

    def g(c):
        w = xs ** c
        sw = w.sum()
        a = np.dot(w, lx) / sw
        b = np.dot(w, lx * lx) / sw
        return 1 / c + mean_lx - a, -1 / c**2 - (b - a * a)

    for _ in range(200):
        f, df = g(c)
        c_new = c - f / df
        if c_new <= 0:
            c_new = 0.5 * c
        if abs(c_new - c) < 1e-12 * c:
            c = c_new
            break
        c = c_new
    else:
        raise DistFitFailure("weibull shape iteration did not converge")
    scale_s = float(np.mean(xs**c)) ** (1 / c)
    scale = scale_s * float(x.max())
    lxx = np.log(x)
    z = (x / scale) ** c
    ll = x.size * (math.log(c) - c * math.log(scale)) + (c - 1) * lxx.sum() - z.sum()
    return FitResult.make("weibull", (c, scale), float(ll))


def _skewnormal_nll(theta, x):
    loc, log_scale, shape = theta
    scale = math.exp(log_scale)
    z = (x - loc) / scale
    ll = (x.size * (math.log(2.0) - log_scale - _LOG_SQRT_2PI) - 0.5 * np.dot(z, z)
          + special.log_ndtr(shape * z).sum())
    return -ll


def _skewnormal_grad(theta, x):
    loc, log_scale, shape = theta
    scale = math.exp(log_scale)
    z = (x - loc) / scale
    u = shape * z
    # d/du log Phi(u) = phi(u)/Phi(u), computed in log space for stability
    ratio = np.exp(-0.5 * u * u - _LOG_SQRT_2PI - special.log_ndtr(u))
    d_loc = (z.sum() - shape * ratio.sum()) / scale
    d_logscale = -x.size + np.dot(z, z) - shape * np.dot(ratio, z)
    d_shape = np.dot(ratio, z)
    return -np.array([d_loc, d_logscale, d_shape])


SKEW_START_SHAPES = (0.0, -2.0, 2.0, -6.0, 6.0)


def _fit_skewnormal(x):
    """Multi-start BFGS over (location, log scale, shape); 5 fixed starts."""
    mu = float(x.mean())
    sd = float(x.std())
    best = None
    for a in SKEW_START_SHAPES:
        # moment-matched location/scale for the starting shape
        delta = a / math.sqrt(1 + a * a)
        omega = sd / math.sqrt(1 - 2 * delta**2 / math.pi)
        xi = mu - omega * delta * math.sqrt(2 / math.pi)
        res = optimize.minimize(_skewnormal_nll, np.array([xi, math.log(omega), a]), args=(x,),
                                jac=_skewnormal_grad, method="BFGS",
                                options={"gtol": 1e-8, "maxiter": 500})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise DistFitFailure("skew-normal: no start produced a finite likelihood")
    loc, log_scale, shape = best.x
    if abs(shape) > SKEW_BOUNDARY:
        # the shape MLE runs off to infinity (half-normal limit); report the
        # shape-0 member instead, which is the normal fit with one extra parameter
        return FitResult.make("skewnormal", (mu, sd, 0.0), _normal_loglik(x, mu, sd),
                              ("boundary_normal_equivalent",))
    return FitResult.make("skewnormal", (loc, math.exp(log_scale), shape), -best.fun)


_FITTERS = {
    "normal": _fit_normal,
    "lognormal": _fit_lognormal,
    "gamma": _fit_gamma,
    "weibull": _fit_weibull,
    "skewnormal": _fit_skewnormal,
}


def fit_family(family: str, samples) -> FitResult:
    """Maximum-likelihood fit of one family.

    normal and lognormal are closed form, gamma and Weibull use Newton on the
    shape equation, skew-normal uses multi-start BFGS seeded by the normal
    fit, so its log-likelihood never falls below the normal one.
    """
    if family not in _FITTERS:
        raise ValueError(f"unknown family {family!r}")
    x = np.asarray(samples, dtype=float)
    if x.size < MIN_FIT_SAMPLES:
        raise ValueError(f"need at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    if np.all(x == x[0]):
        raise DegenerateSampleError("all samples are identical")
    if family != "normal" and family != "skewnormal" and np.any(x <= 0):
        raise ValueError(f"{family} needs strictly positive samples")
    return _FITTERS[family](x)


def _aic_order(a: FitResult, b: FitResult) -> int:
    if abs(a.aic - b.aic) >= AIC_TIE:
        return -1 if a.aic < b.aic else 1
    ka = (a.k, a.family)
    kb = (b.k, b.family)
    return (ka > kb) - (ka < kb)


@dataclass
class AicRanking:
    fits: list[FitResult]
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def winner(self) -> FitResult:
        return self.fits[0]


def rank_fits(fits: list[FitResult]) -> list[FitResult]:
    """Ascending AIC; near-ties (< 1e-9) go to fewer parameters, then family name."""
    return sorted(fits, key=functools.cmp_to_key(_aic_order))


def aic_rank(samples, families=FAMILIES) -> AicRanking:
    fits = []
    failures = {}
    for fam in families:
        try:
            fits.append(fit_family(fam, samples))
        except (DistFitFailure, DegenerateSampleError, ValueError) as exc:
            failures[fam] = str(exc)
    if not fits:
        raise DistFitFailure(f"every family failed: {failures}")
    return AicRanking(rank_fits(fits), failures)


def r0_band(r0: float) -> str:
    if r0 < 4:
        return "low"
    if r0 < 8:
        return "mid"
    return "high"


@dataclass
class StratumFit:
    scenario: str
    r0: float
    bin_index: int
    phase: str
    ranking: AicRanking
    nudged: int = 0


def fit_strata(banks: dict, families=FAMILIES, min_samples: int = MIN_FIT_SAMPLES) -> list[StratumFit]:
    """AIC ranking for every (scenario, bin, phase) stratum.

    `banks` maps scenario label -> (ResidualBank, R0).
    """
    out = []
    for label, (bank, r0) in banks.items():
        for (b, phase) in sorted(bank.strata):
            res = bank.strata[(b, phase)]
            if res.size < min_samples:
                continue
            x, nudged = shift_residuals(res)
            try:
                ranking = aic_rank(x, families)
            except DistFitFailure:
                continue
            out.append(StratumFit(label, r0, b, phase, ranking, nudged))
    return out


def aic_win_table(stratum_fits: list[StratumFit], stratification: str = "overall",
                  families=FAMILIES) -> dict[str, dict[str, float]]:
    """Share of stratum fits won by each family, per cell of the stratification.

    stratification is one of ``overall``, ``by_r0_band`` (low < 4 <= mid < 8 <=
    high) or ``by_phase``.
    """
    if stratification == "overall":
        cell = lambda f: "all"  # noqa: E731
    elif stratification == "by_r0_band":
        cell = lambda f: r0_band(f.r0)  # noqa: E731
    elif stratification == "by_phase":
        cell = lambda f: f.phase  # noqa: E731
    else:
        raise ValueError(f"unknown stratification {stratification!r}")
    counts: dict[str, dict[str, int]] = {}
    for f in stratum_fits:
        c = counts.setdefault(cell(f), {fam: 0 for fam in families})
        c[f.ranking.winner.family] = c.get(f.ranking.winner.family, 0) + 1
    table = {}
    for key, c in counts.items():
        total = sum(c.values())
        table[key] = {fam: c.get(fam, 0) / total for fam in families}
    return table


# -- Anderson-Darling ----------------------------------------------------------------


@dataclass
class AdResult:
    n: int
    a2: float
    a2_star: float
    rejections: dict[float, bool]


def ad_statistic(y) -> float:
    """A2 of `y` against a normal with sample mean and (n-1) standard deviation."""
    y = np.sort(np.asarray(y, dtype=float))
    n = y.size
    sd = y.std(ddof=1)
    if not sd > 0:
        raise DegenerateSampleError("sample has zero variance")
    z = (y - y.mean()) / sd
    log_cdf = special.log_ndtr(z)
    log_sf = special.log_ndtr(-z)
    i = np.arange(1, n + 1)
    return float(-n - np.sum((2 * i - 1) * (log_cdf + log_sf[::-1])) / n)


def _correct(a2: float, n: int) -> float:
    return a2 * (1 + 0.75 / n + 2.25 / n**2)


def anderson_darling_lognormal(shifted, critical_values=AD_CRITICAL_VALUES) -> AdResult:
    """A-D test of log-normality: the normal-case test applied to log(shifted)."""
    x = np.asarray(shifted, dtype=float)
    if x.size < MIN_AD_SAMPLES:
        raise ValueError(f"need at least {MIN_AD_SAMPLES} samples, got {x.size}")
    if np.any(x <= 0):
        raise ValueError("shifted residuals must be positive")
    a2 = ad_statistic(np.log(x))
    a2s = _correct(a2, x.size)
    return AdResult(x.size, a2, a2s, {lvl: a2s > cv for lvl, cv in critical_values.items()})


def calibrate_ad(n: int, replicates: int = 50_000, seed: int = 0, chunk: int = 2000,
                 critical_values=AD_CRITICAL_VALUES) -> dict[float, float]:
    """Monte Carlo rejection rate of each critical value under the normal null."""
    rng = np.random.default_rng(seed)
    hits = {lvl: 0 for lvl in critical_values}
    i = np.arange(1, n + 1)
    done = 0
    while done < replicates:
        m = min(chunk, replicates - done)
        y = np.sort(rng.standard_normal((m, n)), axis=1)
        z = (y - y.mean(axis=1, keepdims=True)) / y.std(axis=1, ddof=1, keepdims=True)
        a2 = -n - np.sum((2 * i - 1) * (special.log_ndtr(z) + special.log_ndtr(-z)[:, ::-1]), axis=1) / n
        a2s = _correct(1.0, n) * a2
        for lvl, cv in critical_values.items():
            hits[lvl] += int(np.count_nonzero(a2s > cv))
        done += m
    return {lvl: hits[lvl] / replicates for lvl in critical_values}


def ad_rejection_rates(banks: dict, levels=tuple(AD_CRITICAL_VALUES)) -> dict[str, dict[float, float]]:
    """Rejection rate per level over all strata, split by phase and pooled ("both")."""
    decisions: dict[str, list[dict[float, bool]]] = {"pre": [], "post": []}
    for _label, (bank, _r0) in banks.items():
        for (_b, phase), res in sorted(bank.strata.items()):
            if res.size < MIN_AD_SAMPLES:
                continue
            x, _ = shift_residuals(res)
            try:
                decisions[phase].append(anderson_darling_lognormal(x).rejections)
            except DegenerateSampleError:
                continue
    out = {}
    for key, rows in (("pre", decisions["pre"]), ("post", decisions["post"]),
                      ("both", decisions["pre"] + decisions["post"])):
        out[key] = {lvl: (float(np.mean([r[lvl] for r in rows])) if rows else float("nan"))
                    for lvl in levels}
    return out


def write_fits_csv(stratum_fits: list[StratumFit], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "bin", "phase", "family", "p1", "p2", "p3", "loglik", "aic"])
        for sf in stratum_fits:
            for f in sf.ranking.fits:
                p = list(f.params) + [""] * (3 - len(f.params))
                w.writerow([sf.scenario, sf.bin_index, sf.phase, f.family,
                            *[repr(v) if v != "" else "" for v in p], repr(f.loglik), repr(f.aic)])
