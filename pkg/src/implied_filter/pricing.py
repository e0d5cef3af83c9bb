"""European option pricing under Black-Scholes and Heston (optionally with jumps).

The Heston price uses a single Fourier integral along the line ``Im(u) = -1/2``
(Lewis' formula) with the branch-cut-stable characteristic function. The
integral is truncated where the integrand envelope is negligible and evaluated
with composite Gauss-Legendre quadrature whose panel count doubles until two
successive results agree.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from ._validation import check_nonnegative, check_positive
from .exceptions import InvalidInputError, NoSolutionError, NumericFailureError
from .params import MarketState, ModelParams, OptionKind, OptionSpec

__all__ = [
    "bs_call_prices",
    "bs_price",
    "heston_call_prices",
    "heston_cf",
    "heston_price",
    "implied_vol",
    "implied_vols",
    "mc_price_oracle",
]

GL_NODES_PER_PANEL = 32
INITIAL_PANELS = 8  # 256 nodes
MAX_PANELS = 2048
INITIAL_CUTOFF = 200.0
MAX_CUTOFF = 200.0 * 2**12
IV_BRACKET = (1e-6, 5.0)
TIME_VALUE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Black-Scholes
# ---------------------------------------------------------------------------

def bs_call_prices(spot, strikes, taus, rates, sigmas):
    """Black-Scholes call prices on a strike-by-volatility grid.

    Parameters
    ----------
    spot : float
    strikes, taus, rates : array_like, shape (M,)
        Per-option strike, time to maturity and rate (scalars broadcast).
    sigmas : array_like, shape (H,)
        Volatilities; zero is allowed and gives the discounted intrinsic value.

    Returns
    -------
    ndarray, shape (M, H)
    """
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    taus = np.broadcast_to(np.asarray(taus, dtype=float), strikes.shape)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), strikes.shape)
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if np.any(sigmas < 0):
        raise InvalidInputError("volatility must be nonnegative")

    K = strikes[:, None]
    disc_k = K * np.exp(-rates * taus)[:, None]
    sd = sigmas[None, :] * np.sqrt(taus)[:, None]
    intrinsic = np.maximum(spot - disc_k, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / disc_k) + 0.5 * sd**2) / sd
        price = spot * ndtr(d1) - disc_k * ndtr(d1 - sd)
    price = np.where(sd > 0.0, price, intrinsic)
    return np.clip(price, intrinsic, spot)


def bs_price(mkt: MarketState, opt: OptionSpec, sigma: float) -> float:
    """Black-Scholes price of a European call or put."""
    sigma = check_nonnegative(sigma, "sigma")
    tau = opt.tau(mkt)
    call = float(bs_call_prices(mkt.spot, [opt.strike], tau, mkt.rate, [sigma])[0, 0])
    if opt.kind is OptionKind.CALL:
        return call
    disc_k = opt.strike * math.exp(-mkt.rate * tau)
    if sigma * math.sqrt(tau) == 0.0:
        return max(disc_k - mkt.spot, 0.0)
    sd = sigma * math.sqrt(tau)
    d1 = (math.log(mkt.spot / disc_k) + 0.5 * sd * sd) / sd
    put = disc_k * ndtr(-(d1 - sd)) - mkt.spot * ndtr(-d1)
    return float(min(max(put, max(disc_k - mkt.spot, 0.0)), disc_k))


def _bs_vega(spot, disc_k, tau, sigma):
    sd = sigma * math.sqrt(tau)
    d1 = (math.log(spot / disc_k) + 0.5 * sd * sd) / sd
    return spot * math.sqrt(tau) * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi)


def implied_vol(mkt: MarketState, opt: OptionSpec, price: float, tol: float = 1e-12) -> float:
    """Black-Scholes implied volatility by bisection followed by Newton polish.

    The out-of-the-money leg (put below the forward, call above) is inverted,
    converted through parity when needed, so that deep in-the-money quotes do
    not lose their time value to cancellation.

    Raises
    ------
    NoSolutionError
        If ``price`` is outside the open no-arbitrage interval, its time value
        is below ``TIME_VALUE_FLOOR * spot``, or no volatility in ``[1e-6, 5]``
        reproduces it.
    """
    price = float(price)
    tau = opt.tau(mkt)
    disc_k = opt.strike * math.exp(-mkt.rate * tau)
    call = price if opt.kind is OptionKind.CALL else price + mkt.spot - disc_k
    lower = max(mkt.spot - disc_k, 0.0)
    if not (lower < call < mkt.spot):
        raise NoSolutionError(
            f"price {price!r} outside no-arbitrage bounds for strike {opt.strike}"
        )
    leg = OptionKind.PUT if disc_k < mkt.spot else OptionKind.CALL
    if opt.kind is leg:
        otm = price
    else:
        otm = call if leg is OptionKind.CALL else call - mkt.spot + disc_k
    if otm <= TIME_VALUE_FLOOR * mkt.spot:
        raise NoSolutionError(
            f"time value {otm:.3g} at strike {opt.strike} is below rounding precision"
        )
    leg_opt = OptionSpec(opt.strike, opt.maturity, leg)

    def f(sig):
        return bs_price(mkt, leg_opt, sig) - otm

    lo, hi = IV_BRACKET
    if f(lo) > 0.0 or f(hi) < 0.0:
        raise NoSolutionError(
            f"no volatility in [{lo}, {hi}] reproduces price {price!r}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-7:
            break
    sigma = 0.5 * (lo + hi)
    for _ in range(30):
        err = f(sigma)
        # relative test: far out-of-the-money time values are tiny
        if abs(err) <= tol * min(1.0, otm):
            break
        vega = _bs_vega(mkt.spot, disc_k, tau, sigma)
        step = err / vega if vega > 0 else 0.0
        candidate = sigma - step
        if not lo <= candidate <= hi or step == 0.0:
            # Newton left the bracket; fall back to bisection
            if err > 0:
                hi = sigma
            else:
                lo = sigma
            candidate = 0.5 * (lo + hi)
        elif err > 0:
            hi = sigma
        else:
            lo = sigma
        if abs(candidate - sigma) < 1e-15:
            sigma = candidate
            break
        sigma = candidate
    return sigma


def implied_vols(mkt: MarketState, strikes, maturity, prices, kind=OptionKind.CALL):
    """Implied volatilities for a strip of prices; NaN where none exists."""
    out = np.full(len(prices), np.nan)
    for i, (k, p) in enumerate(zip(strikes, prices)):
        try:
            out[i] = implied_vol(mkt, OptionSpec(k, maturity, kind), p)
        except NoSolutionError:
            pass
    return out


# ---------------------------------------------------------------------------
# Heston characteristic function
# ---------------------------------------------------------------------------

def _log1p_ratio(z):
    """log(1 + z) / z, accurate for small complex z."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.log1p(z) / z
    series = 1.0 - z * (0.5 - z * (1.0 / 3.0 - z * (0.25 - z / 5.0)))
    return np.where(small, series, big)


def _log_cf_coeffs(u, tau, params: ModelParams):
    """Coefficients of the forward-normalized log characteristic function.

    Returns ``(a, b)`` with ``log E[exp(iu log(S_T / F))] = a + b * x0`` where
    ``F`` is the forward and ``x0`` the current variance. All divisions by
    ``gamma**2`` are carried out analytically so that the constant-volatility
    limit ``gamma -> 0`` is exact.
    """
    h = params.heston
    kappa, xbar, gam, rho = h.kappa, h.xbar, h.gamma_vol, h.rho
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    s = iu + u * u
    beta = kappa - rho * gam * iu
    d = np.sqrt(beta * beta + gam * gam * s)
    bd = beta + d
    q = -s / bd
    g = gam * gam * q / bd
    one_minus_e = -np.expm1(-d * tau)
    e = 1.0 - one_minus_e
    b = q * one_minus_e / (1.0 - g * e)
    z_scaled = q * one_minus_e / (bd * (1.0 - g))
    a = kappa * xbar * (q * tau - 2.0 * z_scaled * _log1p_ratio(gam * gam * z_scaled))
    j = params.jumps
    if j is not None and j.lambda_j > 0.0:
        jump_cf = np.exp(iu * j.log_jump_mean - 0.5 * j.sigma_j**2 * u * u)
        a = a + j.lambda_j * tau * (jump_cf - 1.0) - iu * j.compensator * tau
    return a, b


def heston_cf(params: ModelParams, mkt: MarketState, x0: float, u, horizon: float):
    """Characteristic function of the log-return ``log(S_{t+h} / S_t)``.

    ``E[exp(i u log(S_{t+h}/S_t))]`` under the risk-neutral measure, so that
    ``heston_cf(..., u=-1j, ...) == exp(rate * horizon)``.
    """
    horizon = check_positive(horizon, "horizon")
    x0 = check_nonnegative(x0, "x0")
    u_arr = np.asarray(u, dtype=complex)
    a, b = _log_cf_coeffs(u_arr, horizon, params)
    out = np.exp(1j * u_arr * mkt.rate * horizon + a + b * x0)
    return complex(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Heston Fourier pricing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gl_base(n):
    return np.polynomial.legendre.leggauss(n)


def _composite_gl(upper, panels):
    """Gauss-Legendre nodes on ``[0, upper]``.

    ``panels`` uniform panels, with the first one split geometrically toward
    zero where the ``1 / (v**2 + 1/4)`` factor varies on a unit scale.
    """
    x, w = _gl_base(GL_NODES_PER_PANEL)
    width = upper / panels
    inner = 0.25 * 2.0 ** np.arange(max(int(math.log2(width / 0.25)), 0) + 1)
    edges = np.union1d(np.concatenate([[0.0], inner[inner < width]]),
                       np.linspace(0.0, upper, panels + 1))
    left = edges[:-1]
    half = 0.5 * np.diff(edges)
    nodes = (left[:, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _psi_shifted(v, tau, params, x0s):
    a, b = _log_cf_coeffs(np.asarray(v) - 0.5j, tau, params)
    return np.exp(a[None, :] + b[None, :] * x0s[:, None])


def _integration_cutoff(tau, params, x0s, prefactor, tol):
    upper = INITIAL_CUTOFF
    while True:
        env = np.abs(_psi_shifted(np.array([upper]), tau, params, x0s)).max()
        if prefactor * env / upper < tol * 1e-3:
            return upper
        if upper >= MAX_CUTOFF:
            raise NumericFailureError(
                f"characteristic function has not decayed by u={upper:g}",
                achieved=float(prefactor * env / upper),
            )
        upper *= 2.0


def _call_prices_one_maturity(params, spot, strikes, tau, rate, x0s, tol):
    fwd = spot * math.exp(rate * tau)
    k = np.log(strikes / fwd)
    scale = np.sqrt(spot * strikes) * math.exp(-0.5 * rate * tau) / math.pi
    upper = _integration_cutoff(tau, params, x0s, float(scale.max()), tol)

    def evaluate(panels):
        v, w = _composite_gl(upper, panels)
        psi = _psi_shifted(v, tau, params, x0s)  # (H, n)
        phase = np.outer(k, v)
        psi = psi * (w / (v * v + 0.25))[None, :]
        # Re[exp(-i k v) psi] = cos(k v) Re(psi) + sin(k v) Im(psi)
        integral = np.cos(phase) @ psi.real.T + np.sin(phase) @ psi.imag.T  # (M, H)
        return spot - scale[:, None] * integral

    panels = INITIAL_PANELS
    prev = evaluate(panels)
    while True:
        panels *= 2
        cur = evaluate(panels)
        diff = float(np.max(np.abs(cur - prev)))
        if diff < tol:
            return cur
        if panels >= MAX_PANELS:
            raise NumericFailureError(
                f"Heston quadrature did not converge (last change {diff:.3g})",
                achieved=diff,
                best=cur,
            )
        prev = cur


def heston_call_prices(params: ModelParams, spot, strikes, taus, rates, x0s, tol=1e-9):
    """Heston (or Heston-with-jumps) call prices on a quote-by-variance grid.

    Parameters
    ----------
    params : ModelParams
    spot : float
    strikes, taus, rates : array_like, shape (M,)
        Scalars broadcast against ``strikes``.
    x0s : array_like, shape (H,)
        Current variance values.
    tol : float
        Absolute tolerance between successive quadrature refinements.

    Returns
    -------
    ndarray, shape (M, H)
    """
    spot = check_positive(spot, "spot")
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    taus = np.broadcast_to(np.asarray(taus, dtype=float), strikes.shape)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), strikes.shape)
    x0s = np.atleast_1d(np.asarray(x0s, dtype=float))
    if np.any(x0s < 0):
        raise InvalidInputError("variance states must be nonnegative")
    if np.any(taus <= 0):
        raise InvalidInputError("times to maturity must be positive")
    if np.any(strikes <= 0):
        raise InvalidInputError("strikes must be positive")

    out = np.empty((strikes.size, x0s.size))
    pairs = np.stack([taus, rates], axis=1)
    for tau, rate in np.unique(pairs, axis=0):
        rows = np.flatnonzero((taus == tau) & (rates == rate))
        out[rows] = _call_prices_one_maturity(
            params, spot, strikes[rows], float(tau), float(rate), x0s, tol
        )
    upper = np.full_like(out, spot)
    lower = np.maximum(spot - (strikes * np.exp(-rates * taus))[:, None], 0.0)
    return np.clip(out, lower, upper)


def heston_price(params: ModelParams, mkt: MarketState, opt: OptionSpec, x0: float,
                 tol: float = 1e-9) -> float:
    """Price a European option under Heston, with jumps when ``params.jumps`` is set."""
    x0 = check_nonnegative(x0, "x0")
    tau = opt.tau(mkt)
    call = float(heston_call_prices(params, mkt.spot, [opt.strike], tau, mkt.rate, [x0], tol)[0, 0])
    if opt.kind is OptionKind.CALL:
        return call
    return call - mkt.spot + opt.strike * math.exp(-mkt.rate * tau)


# ---------------------------------------------------------------------------
# Monte Carlo oracle
# ---------------------------------------------------------------------------

def _mc_worker(params, spot, strike, tau, rate, is_call, x0, n_paths, n_steps, seed_seq,
               chunk=100_000):
    rng = np.random.default_rng(seed_seq)
    h = params.heston
    j = params.jumps
    dt = tau / n_steps
    sqdt = math.sqrt(dt)
    rho_c = math.sqrt(1.0 - h.rho**2)
    drift = rate - (j.compensator if j is not None else 0.0)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        x = np.full(m, float(x0))
        logs = np.zeros(m)
        for _ in range(n_steps):
            xp = np.maximum(x, 0.0)
            sq = np.sqrt(xp)
            z1 = rng.standard_normal(m)
            z2 = rng.standard_normal(m)
            logs += (drift - 0.5 * xp) * dt + sq * sqdt * (h.rho * z1 + rho_c * z2)
            x = x + h.kappa * (h.xbar - xp) * dt + h.gamma_vol * sq * sqdt * z1
            if j is not None and j.lambda_j > 0.0:
                n_jumps = rng.poisson(j.lambda_j * dt, m)
                hit = n_jumps > 0
                if hit.any():
                    nj = n_jumps[hit]
                    logs[hit] += nj * j.log_jump_mean + j.sigma_j * np.sqrt(nj) * rng.standard_normal(nj.size)
        st = spot * np.exp(logs)
        payoff = np.maximum(st - strike, 0.0) if is_call else np.maximum(strike - st, 0.0)
        total += payoff.sum()
        total_sq += (payoff * payoff).sum()
        done += m
    return total, total_sq


def mc_price_oracle(params: ModelParams, mkt: MarketState, opt: OptionSpec, x0: float,
                    n_paths: int = 100_000, n_steps: int | None = None, seed: int = 0,
                    n_workers: int = 1):
    """Monte Carlo price with full-truncation Euler variance and log-Euler spot.

    Paths are split across ``n_workers`` independent streams spawned from
    ``seed``; the result is deterministic for a fixed ``(seed, n_workers)``.

    Returns
    -------
    mean, stderr : float
        Discounted mean payoff and its standard error.
    """
    if n_paths < 1000:
        raise InvalidInputError("n_paths must be at least 1000")
    x0 = check_nonnegative(x0, "x0")
    tau = opt.tau(mkt)
    if n_steps is None:
        n_steps = max(int(math.ceil(250 * tau)), 1)
    n_workers = max(int(n_workers), 1)
    seeds = np.random.SeedSequence(seed).spawn(n_workers)
    shares = [n_paths // n_workers + (i < n_paths % n_workers) for i in range(n_workers)]
    is_call = opt.kind is OptionKind.CALL
    args = [
        (params, mkt.spot, opt.strike, tau, mkt.rate, is_call, x0, shares[i], n_steps, seeds[i])
        for i in range(n_workers)
    ]
    if n_workers == 1:
        results = [_mc_worker(*args[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(lambda a: _mc_worker(*a), args))
    total = sum(r[0] for r in results)
    total_sq = sum(r[1] for r in results)
    mean = total / n_paths
    var = max(total_sq / n_paths - mean * mean, 0.0) * n_paths / (n_paths - 1)
    disc = math.exp(-mkt.rate * tau)
    return disc * mean, disc * math.sqrt(var / n_paths)
