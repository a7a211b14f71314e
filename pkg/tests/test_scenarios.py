import pytest

from epiident.scenarios import (
    DEFAULT_INITIAL_INFECTIOUS,
    PAPER_PAIRS,
    dumps_scenario,
    find_scenario,
    loads_scenario,
    make_scenario,
    paper_grid,
)

TABLE_R0 = [1.21, 2.00, 2.42, 2.86, 4.00, 4.00, 5.71, 5.71, 6.00, 8.00, 8.00, 8.57,
            11.43, 11.43, 12.00, 14.29]


def test_grid_matches_table():
    grid = paper_grid(1000)
    assert len(grid) == 16
    assert [(s.params.alpha, s.params.beta) for s in grid] == list(PAPER_PAIRS)
    assert [round(s.r0, 2) for s in grid] == TABLE_R0
    assert (grid[2].params.alpha, grid[2].params.beta) == (0.33, 0.0008)


def test_rescaled_population_keeps_r0():
    g1 = paper_grid(1000)
    g2 = paper_grid(2000)
    for a, b in zip(g1, g2):
        assert b.params.beta == pytest.approx(a.params.beta / 2)
        assert round(b.r0, 2) == round(a.r0, 2)
    for n in (100, 10_000, 777):
        assert [round(s.r0, 2) for s in paper_grid(n)] == TABLE_R0


def test_grid_is_idempotent_and_labels_unique():
    assert paper_grid(1000) == paper_grid(1000)
    labels = [s.label for s in paper_grid(1000)]
    assert len(set(labels)) == 16


def test_find_scenario():
    grid = paper_grid(1000)
    assert find_scenario(grid, 0.14, 0.002) is grid[-1]
    with pytest.raises(KeyError):
        find_scenario(grid, 0.5, 0.5)


def test_text_round_trip():
    s = make_scenario(0.2, 0.0012, 1000, initial_infectious=3, t_end=120)
    back = loads_scenario(dumps_scenario(s))
    assert back == s
    assert back.digest() == s.digest()


def test_text_format_errors():
    with pytest.raises(ValueError):
        loads_scenario("alpha = 0.1\nbeta = 0.0004\n")
    with pytest.raises(ValueError):
        loads_scenario("alpha = 0.1\nbeta = 0.0004\npopulation = 1000\ncolour = red\n")
    s = loads_scenario("# comment\nalpha = 0.1\nbeta = 0.0004\npopulation = 1000\n")
    assert s.initial.infectious == DEFAULT_INITIAL_INFECTIOUS and s.grid.t_end == 150
