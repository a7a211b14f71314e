import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epiident.ctmc import run_ensemble
from epiident.residuals import (
    AcfCurve,
    ResidualSeries,
    UndefinedAcfError,
    acf,
    ensemble_acf,
    residual_series,
    variance_mean,
    write_residual_scatter,
)
from epiident.rng import RngSeed
from epiident.scenarios import make_scenario
from epiident.sir import integrate_sir
from epiident.synth import gaussian_values

series_st = arrays(np.float64, st.integers(40, 120),
                   elements=st.floats(-1.0, 5.0, allow_nan=False)).filter(lambda x: x.std() > 1e-3)


def test_acf_lag_zero_and_white_noise(rng):
    x = rng.standard_normal(10_000)
    r = acf(x, 30)
    assert r[0] == 1.0
    assert np.sum(np.abs(r[1:]) >= 2 / np.sqrt(10_000)) <= 2


def test_acf_alternating():
    x = np.tile([1.0, -1.0], 50)
    assert acf(x, 5)[1] == pytest.approx(-1.0, abs=0.02)
    assert acf(x, 5)[1] == pytest.approx(-(99 / 100), abs=1e-12)


def test_acf_errors():
    with pytest.raises(UndefinedAcfError):
        acf(np.ones(50), 10)
    with pytest.raises(ValueError):
        acf(np.arange(10.0), 10)


def test_acf_matches_direct_formula(rng):
    x = rng.normal(size=60)
    r = acf(x, 4)
    xc = x - x.mean()
    for k in range(1, 5):
        ref = sum(xc[t] * xc[t + k] for t in range(60 - k)) / sum(v * v for v in xc)
        assert r[k] == pytest.approx(ref, abs=1e-12)


@settings(max_examples=40)
@given(series_st, st.floats(0.01, 100.0))
def test_acf_sign_and_scale_invariance(x, c):
    r = acf(x, 10)
    assert np.allclose(acf(-x, 10), r, atol=1e-12)
    assert np.allclose(acf(c * x, 10), r, atol=1e-12)
    assert np.all(np.abs(r) <= 1 + 1e-12)


def test_ensemble_acf_identical_runs(rng):
    x = rng.normal(size=80)
    curve = ensemble_acf([x, x, x], 10)
    assert np.array_equal(curve.lower, curve.upper)
    assert np.allclose(curve.mean, acf(x, 10))


def test_ensemble_acf_skips_constant_runs(rng):
    runs = [rng.normal(size=80), np.zeros(80), rng.normal(size=80)]
    curve = ensemble_acf(runs, 10)
    assert (curve.runs_used, curve.runs_skipped) == (2, 1)
    assert np.all(curve.lower <= curve.mean) and np.all(curve.mean <= curve.upper)
    with pytest.raises(UndefinedAcfError):
        ensemble_acf([np.zeros(80)] * 2, 10)


def test_ctmc_residuals_correlated_gaussian_white(base_scenario, base_ode):
    s = base_scenario
    ens = run_ensemble(s.params, s.initial, s.grid, 100, RngSeed(21)).filtered()
    curve = ensemble_acf(residual_series(ens.values, base_ode))
    assert curve.mean[0] == 1.0
    assert curve.mean[1] > 0.5
    noise = gaussian_values(base_ode.prevalence, 0.1, np.random.default_rng(5), 100)
    series = residual_series(noise, base_ode)
    n = series[0].residuals.size
    white = ensemble_acf(series)
    # the mean of 100 per-run curves has a tenth of the single-run spread
    assert np.all(np.abs(white.mean[1:] + 1 / n) < 2 / np.sqrt(n))


def test_residual_series_structure(base_ode, base_ensemble):
    series = residual_series(base_ensemble.values[:5], base_ode)
    assert len(series) == 5
    s = series[0]
    assert s.times.min() >= 0 and np.all(base_ode.prevalence[s.times.astype(int)] >= 1)
    assert set(s.phases) <= {"pre", "post"}
    assert np.all(s.residuals >= -1)
    with pytest.raises(ValueError):
        ResidualSeries(np.arange(3.0), np.array([0.0, -2.0, 0.0]), 0, np.array(["pre"] * 3))


def test_variance_mean_identical_runs(base_ode):
    vm = variance_mean(np.tile(base_ode.prevalence, (4, 1)), base_ode)
    assert np.all(vm.variance == 0)
    assert np.array_equal(vm.mean, base_ode.prevalence)


def test_variance_mean_super_poisson():
    s = make_scenario(0.2, 0.0004)
    ode = integrate_sir(s.params, s.initial, s.grid)
    ens = run_ensemble(s.params, s.initial, s.grid, 1000, RngSeed(7))
    assert variance_mean(ens, ode).super_poisson_fraction("pre") > 0.8


def test_variance_mean_poisson_null(base_ode, rng):
    lam = np.maximum(base_ode.prevalence, 1.0)
    draws = rng.poisson(lam, size=(1000, lam.size)).astype(float)
    vm = variance_mean(draws, base_ode)
    ratio = vm.variance / vm.mean
    assert np.mean((ratio >= 0.8) & (ratio <= 1.2)) >= 0.95


def test_variance_mean_grid_mismatch(base_ode):
    with pytest.raises(ValueError):
        variance_mean(np.zeros((3, 5)), base_ode)


def test_scatter_and_acf_csv(tmp_path, base_ode, base_ensemble):
    write_residual_scatter(base_ensemble.values[:2], base_ode, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,I_ode,residual,phase,run"
    assert len(lines) == 1 + 2 * int((base_ode.prevalence >= 1).sum())
    curve = AcfCurve(np.arange(3), np.ones(3), np.ones(3), np.ones(3), 1)
    curve.write_csv(tmp_path / "a.csv", "ctmc")
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "ctmc,0,1.0,1.0,1.0"
