from dataclasses import replace

import numpy as np
import pytest

from epiident.coverage import (
    CoverageConfig,
    Method,
    coverage_table,
    generate_datasets,
    kde_region,
    reference_generators,
    run_coverage,
    sigma_min_search,
    within_nominal,
    write_coverage_csv,
)
from epiident.rng import stream_rng

SMALL = CoverageConfig(j_outer=4, m_inner=50, seed=5, reference_runs=100)


def test_method_parse_and_labels():
    assert Method.parse("gaussian:0.2") == Method("gaussian", 0.2)
    assert Method.parse("gaussian") == Method("gaussian", 0.1)
    assert Method.parse("hybrid").label == "hybrid"
    assert Method("gaussian", 0.1).label == "gaussian:0.1"
    assert Method.parse("ctmc").key != Method.parse("hybrid").key
    with pytest.raises(ValueError):
        Method.parse("poisson")
    with pytest.raises(ValueError):
        Method("gaussian", -1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        CoverageConfig(j_outer=1)
    with pytest.raises(ValueError):
        CoverageConfig(m_inner=49)
    with pytest.raises(ValueError):
        CoverageConfig(level=1.0)
    with pytest.raises(ValueError):
        CoverageConfig(truth="ode")


def test_report_invariants(base_scenario):
    rep = run_coverage(base_scenario, replace(SMALL, method=Method("gaussian", 0.2)))
    assert rep.coverage == np.mean(rep.membership)
    assert len(rep.membership) + rep.excluded + rep.extinct_truth == SMALL.j_outer
    row = rep.as_row()
    assert row["method"] == "gaussian:0.2" and row["j_outer"] == 4


def test_coverage_is_deterministic_and_thread_independent(base_scenario):
    cfg = replace(SMALL, method=Method("ctmc"))
    a = run_coverage(base_scenario, cfg)
    b = run_coverage(base_scenario, replace(cfg, threads=2))
    assert a.membership == b.membership and a.coverage == b.coverage


def test_zero_spread_cloud_misses_truth(base_scenario):
    rep = run_coverage(base_scenario, replace(SMALL, method=Method("gaussian", 0.0)))
    assert rep.coverage == 0.0


def test_region_for_identical_estimates_is_tiny():
    pts = np.tile([0.1, 0.0004], (60, 1))
    region = kde_region(pts, 0.68)
    assert region.contains(np.array([0.1, 0.0004]))
    assert not region.contains(np.array([0.1 * (1 + 1e-4), 0.0004]))


def test_hdr_self_consistency(rng):
    for m in (50, 137, 300):
        region = kde_region(rng.normal(size=(m, 2)) * [0.01, 1e-5] + [0.1, 4e-4], 0.68)
        assert 0.68 <= region.member_fraction() <= 0.68 + 1 / m


def test_generated_datasets(base_scenario):
    s = base_scenario
    gens = reference_generators(s, SMALL, {"empirical", "hybrid"}, 0)
    assert gens.bank is not None and gens.warp is not None
    for kind in ("ctmc", "gaussian", "empirical", "hybrid"):
        rng = stream_rng(1, 2, 3)
        vals = generate_datasets(Method(kind, 0.1), s, 0.1, 0.0004, 7, rng, gens,
                                 keep_extinct=False)
        assert vals.shape == (7, len(s.grid)) and np.all(vals >= 0)
        again = generate_datasets(Method(kind, 0.1), s, 0.1, 0.0004, 7, stream_rng(1, 2, 3), gens,
                                  keep_extinct=False)
        assert np.array_equal(vals, again)
    assert reference_generators(s, SMALL, {"ctmc"}, 0).bank is None


def test_table_cells_reproduce_alone(base_scenario, tmp_path):
    from epiident.scenarios import make_scenario
    other = make_scenario(0.14, 0.0004)
    methods = [Method("gaussian", 0.1), Method("ctmc")]
    table = coverage_table([base_scenario, other], methods, SMALL, [3, 7])
    alone = run_coverage(other, replace(SMALL, method=Method("ctmc")), 7)
    assert table[1][1].membership == alone.membership
    write_coverage_csv(table, [base_scenario, other], methods, tmp_path / "t.csv", 0.68)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ("alpha,beta,R0,label,gaussian:0.1,ctmc,"
                        "gaussian:0.1_within_10pct,ctmc_within_10pct")
    assert len(lines) == 3


def test_within_nominal():
    assert within_nominal(0.78, 0.68)
    assert within_nominal(0.58, 0.68)
    assert not within_nominal(0.79, 0.68)


def test_sigma_min_degenerate_target(base_scenario):
    res = sigma_min_search(base_scenario, 0.0, SMALL)
    assert res.sigma_min == 0.01 and not res.curve
    with pytest.raises(ValueError):
        sigma_min_search(base_scenario, 1.0, SMALL)


def test_sigma_min_search_brackets(base_scenario):
    res = sigma_min_search(base_scenario, 0.5, replace(SMALL, j_outer=6), width=0.5)
    sigmas = [s for s, _ in res.curve]
    assert sigmas[0] == 2.0
    if res.saturated:
        assert res.sigma_min == 2.0 and res.curve[0][1] < 0.5 - 0.03
    else:
        assert sigmas[1] == 0.01 and 0.01 <= res.sigma_min <= 2.0


def test_unclamped_gaussian_method():
    m = Method.parse("gaussian_unclamped:0.8")
    assert (m.kind, m.sigma, m.clamp) == ("gaussian", 0.8, False)
    assert m.label == "gaussian_unclamped:0.8"
    assert Method.parse(m.label) == m
    assert Method.parse("gaussian:0.8").clamp
    assert m.key != Method.parse("gaussian:0.8").key
    with pytest.raises(ValueError):
        Method.parse("gaussian_wide:0.8")


def test_unclamped_cell_runs_with_negative_data(base_scenario):
    cfg = replace(SMALL, j_outer=3, method=Method.parse("gaussian_unclamped:1.5"))
    rep = run_coverage(base_scenario, cfg)
    assert len(rep.membership) + rep.excluded + rep.extinct_truth == 3
