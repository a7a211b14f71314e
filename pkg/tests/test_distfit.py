import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from epiident.distfit import (
    AD_CRITICAL_VALUES,
    FAMILIES,
    DegenerateSampleError,
    FitResult,
    StratumFit,
    AicRanking,
    ad_rejection_rates,
    ad_statistic,
    aic_rank,
    aic_win_table,
    anderson_darling_lognormal,
    calibrate_ad,
    fit_family,
    fit_strata,
    r0_band,
    rank_fits,
    shift_residuals,
    write_fits_csv,
)
from epiident.synth import ResidualBank

SCIPY = {
    "normal": lambda p: stats.norm(p[0], p[1]),
    "lognormal": lambda p: stats.lognorm(p[1], scale=math.exp(p[0])),
    "gamma": lambda p: stats.gamma(p[0], scale=p[1]),
    "weibull": lambda p: stats.weibull_min(p[0], scale=p[1]),
    "skewnormal": lambda p: stats.skewnorm(p[2], p[0], p[1]),
}
SCIPY_FIT = {
    "gamma": lambda x: stats.gamma(*stats.gamma.fit(x, floc=0)),
    "weibull": lambda x: stats.weibull_min(*stats.weibull_min.fit(x, floc=0)),
    "skewnormal": lambda x: stats.skewnorm(*stats.skewnorm.fit(x)),
}


def test_shift_residuals():
    x, nudged = shift_residuals([-1.0, 0.0, 0.25])
    assert list(x) == [1e-9, 1.0, 1.25] and nudged == 1
    with pytest.raises(ValueError):
        shift_residuals([-1.5])


def test_normal_closed_form():
    f = fit_family("normal", np.tile([1.0, 2, 3, 4, 5], 4))
    assert f.params[0] == pytest.approx(3, abs=1e-9)
    assert f.params[1] == pytest.approx(math.sqrt(2), abs=1e-9)


@pytest.mark.parametrize("family", FAMILIES)
def test_loglik_matches_scipy_density(family, rng):
    x = rng.gamma(3.0, 0.4, 400)
    f = fit_family(family, x)
    ref = SCIPY[family](f.params).logpdf(x).sum()
    assert f.loglik == pytest.approx(ref, rel=1e-9)
    assert f.aic == 2 * f.k - 2 * f.loglik


@pytest.mark.parametrize("family", ["gamma", "weibull", "skewnormal"])
def test_mle_at_least_as_good_as_scipy(family, rng):
    x = rng.lognormal(0.0, 0.4, 500)
    ours = fit_family(family, x).loglik
    ref = SCIPY_FIT[family](x).logpdf(x).sum()
    assert ours >= ref - 1e-6


def test_lognormal_location(rng):
    x = np.exp(rng.standard_normal(10_000))
    f = fit_family("lognormal", x)
    assert abs(f.params[0]) < 3 / math.sqrt(10_000)


def test_skewnormal_nests_normal(rng):
    x = rng.normal(1.0, 0.3, 10_000)
    assert fit_family("skewnormal", x).loglik >= fit_family("normal", x).loglik - 1e-6


def test_skewnormal_boundary_flag(rng):
    x = np.abs(rng.standard_normal(2000))
    f = fit_family("skewnormal", x)
    # a half-normal sample pushes the shape MLE to the boundary
    assert "boundary_normal_equivalent" in f.flags
    n = fit_family("normal", x)
    assert f.params == (*n.params, 0.0)
    assert f.loglik == pytest.approx(n.loglik, abs=1e-9)
    assert f.k == 3


def test_skewnormal_interior_fit_has_no_flag(rng):
    x = rng.gamma(4.0, 1.0, 2000)
    f = fit_family("skewnormal", x)
    assert abs(f.params[2]) <= 50 and not f.flags


def test_fit_family_errors():
    with pytest.raises(ValueError):
        fit_family("normal", np.arange(5.0))
    with pytest.raises(DegenerateSampleError):
        fit_family("normal", np.ones(30))
    with pytest.raises(ValueError):
        fit_family("gamma", np.linspace(-1, 1, 30))
    with pytest.raises(ValueError):
        fit_family("cauchy", np.linspace(1, 2, 30))


def test_fit_is_deterministic(rng):
    x = rng.lognormal(0, 0.5, 300)
    assert aic_rank(x).fits == aic_rank(x.copy()).fits


def test_lognormal_self_consistency():
    rng = np.random.default_rng(8)
    wins = sum(aic_rank(rng.lognormal(0, 0.5, 5000)).winner.family == "lognormal"
               for _ in range(100))
    assert wins >= 95


def test_normal_data_nested_winner(rng):
    x = rng.normal(1, 0.05, 5000)
    assert aic_rank(x).winner.family in ("normal", "skewnormal")


def test_tie_rule():
    a = FitResult.make("weibull", (1.0, 1.0), -10.0)
    b = FitResult.make("gamma", (1.0, 1.0), -10.0)
    c = FitResult.make("skewnormal", (0, 1, 0), -9.0)  # same AIC, one parameter more
    for order in ([a, b, c], [c, b, a], [b, c, a]):
        assert [f.family for f in rank_fits(order)] == ["gamma", "weibull", "skewnormal"]


def test_r0_bands():
    assert [r0_band(r) for r in (1.2, 3.99, 4.0, 7.9, 8.0, 20)] == [
        "low", "low", "mid", "mid", "high", "high"]


def _bank(rng, n=200):
    strata = {(0, "pre"): rng.lognormal(0, 0.5, n) - 1, (0, "post"): rng.lognormal(0, 0.2, n) - 1,
              (1, "pre"): rng.normal(0, 0.1, 5)}
    return ResidualBank(strata, np.array([0.0, 10.0, 20.0]))


def test_fit_strata_and_win_table(rng):
    fits = fit_strata({"s1": (_bank(rng), 2.0), "s2": (_bank(rng), 9.0)})
    assert len(fits) == 4  # the 5-sample stratum is skipped
    forced = fit_strata({"s1": (_bank(rng), 2.0)}, families=("gamma",))
    assert aic_win_table(forced, families=("gamma",)) == {"all": {"gamma": 1.0}}
    overall = aic_win_table(fits)
    assert sum(overall["all"].values()) == pytest.approx(1.0)
    assert set(aic_win_table(fits, "by_r0_band")) == {"low", "high"}
    assert set(aic_win_table(fits, "by_phase")) == {"pre", "post"}
    with pytest.raises(ValueError):
        aic_win_table(fits, "by_moon")


def test_fits_csv(tmp_path, rng):
    fits = fit_strata({"s1": (_bank(rng), 2.0)})
    write_fits_csv(fits, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "scenario,bin,phase,family,p1,p2,p3,loglik,aic"
    assert len(lines) == 1 + 2 * len(FAMILIES)


def test_ad_statistic_matches_scipy(rng):
    for n in (10, 100, 1000):
        y = rng.normal(size=n)
        assert ad_statistic(y) == pytest.approx(stats.anderson(y, "norm").statistic, rel=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-50, 50))
def test_ad_affine_invariance(seed, scale, shift):
    y = np.random.default_rng(seed).normal(size=50)
    assert ad_statistic(scale * y + shift) == pytest.approx(ad_statistic(y), abs=1e-9)


def test_ad_small_sample_correction(rng):
    x = rng.lognormal(size=40)
    r = anderson_darling_lognormal(x)
    assert r.a2_star == pytest.approx(r.a2 * (1 + 0.75 / 40 + 2.25 / 1600))
    with pytest.raises(ValueError):
        anderson_darling_lognormal(x[:5])
    with pytest.raises(DegenerateSampleError):
        anderson_darling_lognormal(np.ones(20))


def test_ad_null_rejection_rate():
    rng = np.random.default_rng(17)
    rej = [anderson_darling_lognormal(rng.lognormal(0, 0.7, 1000)).rejections[0.05]
           for _ in range(1000)]
    assert abs(np.mean(rej) - 0.05) <= 0.02


def test_ad_power_against_gamma():
    rng = np.random.default_rng(18)
    rej = [anderson_darling_lognormal(rng.gamma(0.5, 1.0, 1000)).rejections[0.05]
           for _ in range(200)]
    assert np.mean(rej) >= 0.99


def test_shipped_critical_values_calibrate():
    rates = calibrate_ad(100, replicates=20_000, seed=3)
    for level, rate in rates.items():
        assert abs(rate - level) <= 0.02, (level, rate)
    assert set(rates) == set(AD_CRITICAL_VALUES)


def test_ad_rejection_rates_split(rng):
    rates = ad_rejection_rates({"s": (_bank(rng), 2.0)})
    assert set(rates) == {"pre", "post", "both"}
    assert set(rates["both"]) == set(AD_CRITICAL_VALUES)
    assert 0 <= rates["both"][0.05] <= 1


def test_ranking_winner():
    r = AicRanking(rank_fits([FitResult.make("normal", (0, 1), -5.0),
                              FitResult.make("gamma", (1, 1), -4.0)]))
    assert r.winner.family == "gamma"
    sf = StratumFit("x", 2.0, 0, "pre", r)
    assert aic_win_table([sf])["all"]["gamma"] == 1.0
