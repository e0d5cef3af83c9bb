import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from implied_filter.exceptions import InvalidInputError, NoSolutionError
from implied_filter.params import FellerWarning, MarketState, ModelParams, OptionKind, OptionSpec
from implied_filter.pricing import (
    bs_call_prices,
    bs_price,
    heston_call_prices,
    heston_cf,
    heston_price,
    implied_vol,
    mc_price_oracle,
)

HESTON = ModelParams.from_values(2.0, 0.0225, 0.3, -0.6)


def lognormal_call_by_quadrature(spot, strike, tau, rate, sigma):
    """Discounted call payoff integrated against the terminal log-normal density."""
    m = math.log(spot) + (rate - 0.5 * sigma**2) * tau
    s = sigma * math.sqrt(tau)
    pdf = stats.lognorm(s, scale=math.exp(m)).pdf
    val, _ = integrate.quad(lambda x: (x - strike) * pdf(x), strike, np.inf, epsabs=1e-13,
                            epsrel=1e-12, limit=200)
    return math.exp(-rate * tau) * val


@pytest.mark.parametrize("strike,tau,rate,sigma", [
    (100.0, 10 / 252, 0.2423, 0.15),
    (80.0, 0.5, 0.03, 0.25),
    (130.0, 2.0, 0.0, 0.4),
])
def test_bs_matches_quadrature_oracle(strike, tau, rate, sigma):
    got = bs_call_prices(100.0, [strike], tau, rate, [sigma])[0, 0]
    assert got == pytest.approx(lognormal_call_by_quadrature(100.0, strike, tau, rate, sigma),
                                abs=1e-9)


def test_bs_zero_vol_is_discounted_intrinsic():
    prices = bs_call_prices(100.0, [90.0, 110.0], 1.0, 0.05, [0.0])[:, 0]
    np.testing.assert_allclose(prices, [100 - 90 * math.exp(-0.05), 0.0], atol=1e-14)


def test_bs_rejects_negative_vol():
    with pytest.raises(InvalidInputError):
        bs_call_prices(100.0, [100.0], 1.0, 0.0, [-0.1])


def test_heston_reference_value_from_fourier_literature():
    # widely used COS-method benchmark, reference 5.785155450
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FellerWarning)
        p = ModelParams.from_values(1.5768, 0.0398, 0.5751, -0.5711)
    got = heston_price(p, MarketState(100.0, 0.0), OptionSpec(100.0, 1.0), 0.0175)
    assert got == pytest.approx(5.785155450, abs=1e-7)


def test_cf_is_a_martingale_normalized_transform():
    mkt = MarketState(100.0, 0.03)
    assert heston_cf(HESTON, mkt, 0.02, 0.0, 0.5) == pytest.approx(1.0, abs=1e-14)
    assert heston_cf(HESTON, mkt, 0.02, -1j, 0.5) == pytest.approx(math.exp(0.03 * 0.5),
                                                                  abs=1e-13)


def test_cf_with_jumps_keeps_martingale_property():
    p = ModelParams.from_values(2.0, 0.0225, 0.3, -0.6, 0.5, -0.1, 0.15)
    mkt = MarketState(100.0, 0.02)
    assert heston_cf(p, mkt, 0.03, -1j, 1.0) == pytest.approx(math.exp(0.02), abs=1e-12)


@pytest.mark.parametrize("x0,tau", [(0.02, 10 / 252), (0.05, 1.0), (0.01, 0.25)])
def test_zero_vol_of_vol_reduces_to_black_scholes(x0, tau):
    p = ModelParams.from_values(2.0, 0.0225, 0.0, -0.6)
    avg_var = 0.0225 + (x0 - 0.0225) * (-math.expm1(-2.0 * tau)) / (2.0 * tau)
    strikes = np.array([80.0, 95.0, 100.0, 105.0, 120.0])
    he = heston_call_prices(p, 100.0, strikes, tau, 0.03, [x0])[:, 0]
    bs = bs_call_prices(100.0, strikes, tau, 0.03, [math.sqrt(avg_var)])[:, 0]
    np.testing.assert_allclose(he, bs, atol=1e-5 * 100.0)


def test_put_call_parity():
    mkt = MarketState(100.0, 0.04)
    for k in (70.0, 100.0, 140.0):
        c = heston_price(HESTON, mkt, OptionSpec(k, 0.5, OptionKind.CALL), 0.03)
        p = heston_price(HESTON, mkt, OptionSpec(k, 0.5, OptionKind.PUT), 0.03)
        assert c - p == pytest.approx(100.0 - k * math.exp(-0.02), abs=1e-8)
        cb = bs_price(mkt, OptionSpec(k, 0.5, OptionKind.CALL), 0.2)
        pb = bs_price(mkt, OptionSpec(k, 0.5, OptionKind.PUT), 0.2)
        assert cb - pb == pytest.approx(100.0 - k * math.exp(-0.02), abs=1e-8)


def test_heston_agrees_with_monte_carlo():
    mkt = MarketState(100.0, 0.02)
    opt = OptionSpec(100.0, 0.25)
    mean, se = mc_price_oracle(HESTON, mkt, opt, 0.03, n_paths=200_000, n_steps=100, seed=3)
    assert abs(heston_price(HESTON, mkt, opt, 0.03) - mean) < 4 * se


def test_monte_carlo_is_deterministic_per_seed():
    mkt = MarketState(100.0)
    opt = OptionSpec(95.0, 0.1, OptionKind.PUT)
    a = mc_price_oracle(HESTON, mkt, opt, 0.02, n_paths=2000, seed=7, n_workers=2)
    b = mc_price_oracle(HESTON, mkt, opt, 0.02, n_paths=2000, seed=7, n_workers=2)
    assert a == b


def test_call_prices_decrease_and_are_convex_in_strike():
    strikes = np.arange(70.0, 131.0, 1.0)
    c = heston_call_prices(HESTON, 100.0, strikes, 0.5, 0.01, [0.02])[:, 0]
    assert np.all(np.diff(c) < 0)
    assert np.all(np.diff(c, 2) > -1e-10)


def test_call_prices_increase_with_variance_state():
    c = heston_call_prices(HESTON, 100.0, [100.0], 0.25, 0.0, np.linspace(0.0, 0.1, 11))[0]
    assert np.all(np.diff(c) > 0)


def test_implied_vol_rejects_arbitrage_price():
    with pytest.raises(NoSolutionError):
        implied_vol(MarketState(100.0), OptionSpec(100.0, 1.0), 100.5)


@settings(max_examples=40, deadline=None)
@given(strike=st.floats(60.0, 160.0), tau=st.floats(0.02, 3.0), sigma=st.floats(0.05, 1.5),
       rate=st.floats(-0.01, 0.1), put=st.booleans())
def test_implied_vol_round_trip(strike, tau, sigma, rate, put):
    mkt = MarketState(100.0, rate)
    opt = OptionSpec(strike, tau, OptionKind.PUT if put else OptionKind.CALL)
    price = bs_price(mkt, opt, sigma)
    # skip prices with no usable time value
    intrinsic = max((1 if not put else -1) * (100.0 - strike * math.exp(-rate * tau)), 0.0)
    if price - intrinsic < 1e-6:
        return
    assert implied_vol(mkt, opt, price) == pytest.approx(sigma, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(kappa=st.floats(0.5, 5.0), xbar=st.floats(0.01, 0.09), rho=st.floats(-0.9, 0.5),
       x0=st.floats(0.005, 0.1), tau=st.floats(0.05, 2.0))
def test_heston_prices_respect_no_arbitrage_bounds(kappa, xbar, rho, x0, tau):
    gam = 0.9 * math.sqrt(2 * kappa * xbar)
    p = ModelParams.from_values(kappa, xbar, gam, rho)
    strikes = np.array([60.0, 90.0, 100.0, 110.0, 160.0])
    c = heston_call_prices(p, 100.0, strikes, tau, 0.02, [x0])[:, 0]
    lower = np.maximum(100.0 - strikes * math.exp(-0.02 * tau), 0.0)
    assert np.all(c >= lower - 1e-12) and np.all(c <= 100.0)


def test_implied_vol_of_deep_in_the_money_call_uses_the_put_leg():
    mkt = MarketState(100.0, 0.02)
    opt = OptionSpec(70.0, 0.25)
    price = bs_price(mkt, opt, 0.3)
    assert implied_vol(mkt, opt, price) == pytest.approx(0.3, abs=1e-9)
    # time value far below the rounding of a price near 30
    with pytest.raises(NoSolutionError):
        implied_vol(mkt, OptionSpec(40.0, 0.05), bs_price(mkt, OptionSpec(40.0, 0.05), 0.1))
