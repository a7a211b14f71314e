import numpy as np
import pytest
from scipy import optimize

from epiident.estimate import (
    FitConfig,
    FitFailure,
    best_fit,
    default_config,
    fit_batch,
    sse_objective,
    write_estimates_csv,
)
from epiident.sir import integrate_sir
from epiident.synth import gaussian_values, warp_values


@pytest.fixture(scope="module")
def cfg(base_scenario):
    return default_config(base_scenario.params, base_scenario.initial)


def test_objective_zero_at_truth(base_scenario, base_ode):
    s = base_scenario
    assert sse_objective(s.params, base_ode, s.initial) == 0.0
    shifted = base_ode.with_values(base_ode.prevalence + 1.0)
    assert sse_objective(s.params, shifted, s.initial) == pytest.approx(len(base_ode.grid), rel=1e-9)


def test_objective_matches_hand_sum(base_scenario, base_ode, rng):
    s = base_scenario
    y = base_ode.prevalence + rng.normal(0, 5, base_ode.prevalence.size)
    other = s.params.with_rates(0.11, 0.00042)
    model = integrate_sir(other, s.initial, s.grid).prevalence
    total = 0.0
    for a, b in zip(model, y):
        total += (float(a) - float(b)) ** 2
    got = sse_objective(other, base_ode.with_values(y), s.initial)
    assert got == pytest.approx(total, rel=1e-12)


def test_noiseless_recovery(base_scenario, base_ode, cfg):
    est = best_fit(base_ode, cfg.around(0.13, 0.0003))
    assert est.alpha_hat == pytest.approx(0.1, rel=1e-3)
    assert est.beta_hat == pytest.approx(0.0004, rel=1e-3)
    same = best_fit(base_ode.with_values(warp_values(base_ode, np.array([[1.0, 0.0]]))[0]),
                    cfg.around(0.13, 0.0003))
    assert (same.alpha_hat, same.beta_hat) == (est.alpha_hat, est.beta_hat)


def test_reported_sse_matches_objective(base_scenario, base_ode, cfg, rng):
    s = base_scenario
    y = gaussian_values(base_ode.prevalence, 0.1, rng, 1)[0]
    data = base_ode.with_values(y)
    est = best_fit(data, cfg)
    again = sse_objective(est.params(s.params.population), data, s.initial)
    assert est.sse == pytest.approx(again, rel=1e-12)
    for a, b in cfg.initial_guesses:
        assert est.sse <= sse_objective(s.params.with_rates(a, b), data, s.initial)
    assert best_fit(data, cfg) == est


def test_agrees_with_scipy_nelder_mead(base_scenario, base_ode, cfg, rng):
    s = base_scenario
    y = gaussian_values(base_ode.prevalence, 0.1, rng, 1)[0]
    data = base_ode.with_values(y)
    est = best_fit(data, cfg)

    def f(x):
        return sse_objective(s.params.with_rates(*np.exp(x)), data, s.initial)

    ref = optimize.minimize(f, np.log([0.1, 0.0004]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 5000})
    assert est.sse <= ref.fun * (1 + 1e-8)
    assert np.allclose([est.alpha_hat, est.beta_hat], np.exp(ref.x), rtol=1e-4)


def test_batch_rows_match_single_fits(base_scenario, base_ode, cfg, rng):
    ys = gaussian_values(base_ode.prevalence, 0.1, rng, 5)
    batch = fit_batch(ys, base_scenario.grid, cfg, lanes=4)
    for y, row in zip(ys, batch):
        e = best_fit(base_ode.with_values(y), cfg)
        assert (row[0], row[1], row[2]) == (e.alpha_hat, e.beta_hat, e.sse)


def test_gaussian_cv_magnitudes(base_scenario, base_ode, cfg):
    ys = gaussian_values(base_ode.prevalence, 0.1, np.random.default_rng(99), 1000)
    fits = fit_batch(ys, base_scenario.grid, cfg)
    cv = 100 * fits[:, :2].std(axis=0, ddof=1) / fits[:, :2].mean(axis=0)
    assert abs(cv[0] - 1.90) <= 0.7
    assert abs(cv[1] - 1.00) <= 0.7


def test_config_validation(base_scenario):
    s = base_scenario
    with pytest.raises(ValueError):
        FitConfig((), 1000, s.initial)
    with pytest.raises(ValueError):
        FitConfig(((0.1, 0.0004),), 1000, s.initial, tolerance=0.0)
    with pytest.raises(ValueError):
        FitConfig(((0.1, -1.0),), 1000, s.initial)


def test_bad_data(base_ode, cfg):
    with pytest.raises(ValueError):
        best_fit(base_ode.with_values(-base_ode.prevalence), cfg)
    with pytest.raises(ValueError):
        fit_batch(np.zeros((1, 5)), base_ode.grid, cfg)


def test_negative_data_allowed_on_request(base_ode, cfg):
    y = base_ode.prevalence.copy()
    y[-5:] -= 0.5  # tail dips below zero
    with pytest.raises(ValueError):
        fit_batch(y[None, :], base_ode.grid, cfg)
    row = fit_batch(y[None, :], base_ode.grid, cfg, allow_negative=True)[0]
    assert np.isfinite(row[2])
    assert row[0] == pytest.approx(0.1, rel=1e-3) and row[1] == pytest.approx(0.0004, rel=1e-3)


def test_overflowing_starts_fail(base_ode, base_scenario):
    s = base_scenario
    cfg = FitConfig(((1e200, 1e200),), 1000, s.initial, max_iterations=5)
    with pytest.raises(FitFailure):
        best_fit(base_ode, cfg)


def test_estimates_csv(tmp_path, base_ode, cfg):
    e = best_fit(base_ode, cfg)
    write_estimates_csv([e, None], tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "dataset_id,alpha_hat,beta_hat,sse,converged,iters"
    assert lines[2] == "1,,,,false,0"
