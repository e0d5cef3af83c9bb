import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implied_filter.exceptions import InvalidInputError
from implied_filter.matrix import (
    Quote,
    QuoteSet,
    StateGrid,
    build_matrix,
    condition_diagnostics,
    read_matrix_csv,
    write_matrix_csv,
)
from implied_filter.params import MarketState, ModelParams, OptionKind, OptionSpec
from implied_filter.pricing import bs_call_prices, heston_price

HESTON = ModelParams.from_values(2.0, 0.0225, 0.3, -0.6)
MKT = MarketState(100.0, math.log(1.009662) / (10 / 252))


def quotes(strikes, tau=10 / 252, kind=OptionKind.CALL):
    return QuoteSet.from_prices(MKT, strikes, tau, np.zeros(len(strikes)), kind)


def test_bs_matrix_columns_are_bs_prices():
    grid = StateGrid.uniform(61, 0.0082, "volatility")
    q = quotes(59.0 + np.arange(1, 62))
    C = build_matrix(None, q, grid, "black_scholes")
    assert C.shape == (61, 61)
    ref = bs_call_prices(100.0, q.strikes, q.taus, MKT.rate, grid.points)
    np.testing.assert_array_equal(C.entries, ref)


def test_heston_matrix_entry_matches_single_price():
    grid = StateGrid.uniform(5, 0.01)
    q = quotes([95.0, 100.0, 105.0])
    C = build_matrix(HESTON, q, grid)
    single = heston_price(HESTON, MKT, OptionSpec(100.0, 10 / 252), 0.03)
    assert C.entries[1, 2] == pytest.approx(single, abs=1e-12)


def test_put_rows_follow_parity():
    grid = StateGrid.uniform(4, 0.01)
    calls = build_matrix(HESTON, quotes([90.0, 110.0]), grid).entries
    puts = build_matrix(HESTON, quotes([90.0, 110.0], kind=OptionKind.PUT), grid).entries
    parity = 100.0 - np.array([90.0, 110.0]) * math.exp(-MKT.rate * 10 / 252)
    np.testing.assert_allclose(calls - puts, np.repeat(parity[:, None], 4, axis=1), atol=1e-10)


def test_heston_matrix_is_severely_ill_conditioned():
    grid = StateGrid.uniform(41, 0.0026)
    C = build_matrix(HESTON, quotes(79.0 + np.arange(1, 42)), grid)
    diag = condition_diagnostics(C)
    assert diag.cond >= 1e9
    assert diag.rank < 41
    assert np.all(np.diff(diag.singular_values) <= 0)


def test_rank_tolerance_is_relative_and_monotone():
    A = np.diag([1.0, 1e-3, 1e-6, 1e-9])
    assert condition_diagnostics(A).rank == 4
    assert condition_diagnostics(A, rank_tol=1e-4).rank == 2
    assert condition_diagnostics(A, rank_tol=1e-7).rank == 3
    assert condition_diagnostics(A).effective_rank == 1  # equal gaps, first wins


def test_effective_rank_finds_the_elbow():
    A = np.diag([1.0, 0.5, 0.25, 1e-10, 5e-11])
    assert condition_diagnostics(A).effective_rank == 3


def test_grid_meaning_must_match_model():
    with pytest.raises(InvalidInputError):
        build_matrix(HESTON, quotes([100.0]), StateGrid.uniform(3, 0.1, "volatility"))
    with pytest.raises(InvalidInputError):
        build_matrix(None, quotes([100.0]), StateGrid.uniform(3, 0.1, "variance"),
                     "black_scholes")


def test_jump_model_requires_jumps():
    with pytest.raises(InvalidInputError):
        build_matrix(HESTON, quotes([100.0]), StateGrid.uniform(3, 0.01), "heston_jumps")


def test_heston_model_ignores_jump_parameters():
    jumpy = ModelParams.from_values(2.0, 0.0225, 0.3, -0.6, 0.5, -0.1, 0.1)
    grid = StateGrid.uniform(3, 0.01)
    a = build_matrix(jumpy, quotes([100.0]), grid, "heston").entries
    b = build_matrix(HESTON, quotes([100.0]), grid, "heston").entries
    c = build_matrix(jumpy, quotes([100.0]), grid, "heston_jumps").entries
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


@pytest.mark.parametrize("points", [[], [0.1, 0.1], [0.2, 0.1], [-0.1, 0.1]])
def test_invalid_grids(points):
    with pytest.raises(InvalidInputError):
        StateGrid(np.array(points, dtype=float))


def test_quote_requires_ordered_bid_ask():
    with pytest.raises(InvalidInputError):
        Quote(OptionSpec(100.0, 0.5), bid=2.0, ask=1.0)
    with pytest.raises(InvalidInputError):
        Quote(OptionSpec(100.0, 0.5))
    assert Quote(OptionSpec(100.0, 0.5), bid=1.0, ask=2.0).mid == 1.5


def test_expired_option_rejected():
    with pytest.raises(InvalidInputError):
        QuoteSet((Quote(OptionSpec(100.0, 0.0), mid=1.0),), MarketState(100.0))


def test_matrix_csv_round_trip():
    grid = StateGrid.uniform(6, 0.005)
    C = build_matrix(HESTON, quotes([95.0, 100.0, 105.0]), grid)
    buf = io.StringIO()
    write_matrix_csv(C, buf)
    back = read_matrix_csv(io.StringIO(buf.getvalue()))
    np.testing.assert_allclose(back.entries, C.entries, rtol=1e-11)
    assert back.grid == grid
    assert back.labels == C.labels


@settings(max_examples=20, deadline=None)
@given(x=st.lists(st.floats(1e-4, 0.2), min_size=2, max_size=8, unique=True))
def test_columns_increase_with_state(x):
    grid = StateGrid(np.sort(np.array(x)))
    C = build_matrix(HESTON, quotes([90.0, 100.0, 110.0]), grid).entries
    assert np.all(np.diff(C, axis=1) >= -1e-12)
