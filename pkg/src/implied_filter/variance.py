"""Variance-swap rates, a synthetic VIX and the jump-risk premium."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import as_1d, check_nonnegative, check_positive
from .exceptions import InvalidInputError, UnitMismatchError
from .inversion import Density
from .matrix import QuoteSet
from .params import ModelParams, OptionKind

__all__ = [
    "SwapQuoteSeries",
    "TruncationWarning",
    "expected_x_from_density",
    "jump_risk_premium",
    "relative_bias",
    "varswap_rate",
    "vix_from_chain",
]

VIX_HORIZON = 30.0 / 365.0


class TruncationWarning(UserWarning):
    """The strike range does not reach both sides of the forward."""


def _relaxation_factor(z):
    """(1 - exp(-z)) / z with its series near zero."""
    if abs(z) < 1e-8:
        return 1.0 - 0.5 * z
    return -math.expm1(-z) / z


def jump_variance(params: ModelParams):
    """Annualized quadratic variation contributed by jumps."""
    j = params.jumps
    if j is None:
        return 0.0
    return j.lambda_j * (j.sigma_j**2 + j.log_jump_mean**2)


def varswap_rate(params: ModelParams, expected_x, tau_star=VIX_HORIZON, *, jumps=True):
    """Fair variance-swap rate over ``tau_star`` years given ``E[X_now]``.

    Diffusion part ``xbar + (E[X] - xbar) (1 - exp(-kappa tau)) / (kappa tau)``
    plus, when ``jumps`` is true and the model has jumps,
    ``lambda (sigma_J**2 + (log(1 + mu_J) - sigma_J**2 / 2)**2)``.
    """
    expected_x = check_nonnegative(expected_x, "expected_x")
    tau_star = check_positive(tau_star, "tau_star")
    h = params.heston
    rate = h.xbar + (expected_x - h.xbar) * _relaxation_factor(h.kappa * tau_star)
    if jumps:
        rate += jump_variance(params)
    return rate


def expected_x_from_density(d: Density):
    """Mean of a density on a variance grid."""
    if d.grid.state_meaning != "variance":
        raise UnitMismatchError("expected variance needs a variance-state grid")
    return d.mean


def _otm_prices(quotes: QuoteSet, forward):
    """Out-of-the-money price per strike, converting through parity when needed."""
    mats = set(quotes.maturities)
    if len(mats) != 1:
        raise InvalidInputError("the chain must have a single maturity")
    tau = float(quotes.taus[0])
    disc = math.exp(-quotes.rate_for(next(iter(mats))) * tau)
    calls, puts = {}, {}
    for q in quotes:
        (calls if q.opt.kind is OptionKind.CALL else puts)[q.opt.strike] = q.mid
    strikes = np.array(sorted(set(calls) | set(puts)))
    otm = np.empty(strikes.size)
    for i, k in enumerate(strikes):
        fwd_gap = disc * (forward - k)  # C - P
        want_call = k >= forward
        if want_call:
            otm[i] = calls[k] if k in calls else puts[k] + fwd_gap
        else:
            otm[i] = puts[k] if k in puts else calls[k] - fwd_gap
    return strikes, np.maximum(otm, 0.0), tau, disc


def vix_from_chain(quotes: QuoteSet, forward, tau_star=None, *, full_output=False):
    """Model-free volatility index from one maturity of an option chain.

    ``100 * sqrt((2 / tau) * exp(r tau) * int Q(K) / K**2 dK)`` where ``Q`` is
    the out-of-the-money price (puts below the forward, calls above). The
    integral is a trapezoid over the quoted strikes with a node inserted at
    the forward, where the call and put legs meet.

    Parameters
    ----------
    quotes : QuoteSet
        Calls and/or puts of one maturity, at least 5 strikes.
    forward : float
    tau_star : float, optional
        Horizon in years; defaults to the chain's time to maturity.
    full_output : bool
        Also return ``{"truncated": bool, "variance": float}``.
    """
    forward = check_positive(forward, "forward")
    strikes, otm, tau, disc = _otm_prices(quotes, forward)
    if strikes.size < 5:
        raise InvalidInputError(f"need at least 5 strikes, got {strikes.size}")
    tau_star = tau if tau_star is None else check_positive(tau_star, "tau_star")
    truncated = not (strikes[0] < forward < strikes[-1])
    if truncated:
        warnings.warn("strikes do not straddle the forward; the integral is truncated",
                      TruncationWarning, stacklevel=2)
    integrand = otm / strikes**2
    if not truncated and forward not in strikes:
        j = int(np.searchsorted(strikes, forward))
        # both legs coincide at the forward; interpolate the call leg there
        below, above = strikes[j - 1], strikes[j]
        call_below = otm[j - 1] + disc * (forward - below)
        t = (forward - below) / (above - below)
        at_fwd = (1.0 - t) * call_below + t * otm[j]
        strikes = np.insert(strikes, j, forward)
        integrand = np.insert(integrand, j, max(at_fwd, 0.0) / forward**2)
    variance = (2.0 / tau_star) * np.trapezoid(integrand, strikes) / disc
    vix = 100.0 * math.sqrt(max(variance, 0.0))
    if full_output:
        return vix, {"truncated": truncated, "variance": variance}
    return vix


def jump_risk_premium(params: ModelParams):
    """Swap rate minus squared VIX attributable to jumps.

    ``lambda ((log(1 + mu) - sigma**2 / 2)**2 + 2 log(1 + mu) - 2 mu)``.
    """
    j = params.jumps
    if j is None:
        raise InvalidInputError("jump parameters are required")
    return j.lambda_j * (j.log_jump_mean**2 + 2.0 * math.log1p(j.mu_j) - 2.0 * j.mu_j)


@dataclass(frozen=True)
class SwapQuoteSeries:
    """Model swap rates (variance units) against VIX levels (index points)."""

    times: tuple
    model_rate: np.ndarray
    vix: np.ndarray

    def __post_init__(self):
        times = tuple(self.times)
        rate = as_1d(self.model_rate, "model_rate")
        vix = as_1d(self.vix, "vix")
        if not len(times) == rate.size == vix.size:
            raise InvalidInputError("series lengths differ")
        if np.any(rate < 0):
            raise InvalidInputError("model rates must be nonnegative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "model_rate", rate)
        object.__setattr__(self, "vix", vix)

    @property
    def bias(self):
        return (100.0 * np.sqrt(self.model_rate) - self.vix) / self.vix

    def to_csv(self, path_or_buf=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["date", "model_rate", "vix", "bias"])
        for t, r, v, b in zip(self.times, self.model_rate, self.vix, self.bias):
            writer.writerow([str(t), f"{r:.12g}", f"{v:.12g}", f"{b:.12g}"])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
        return None


def relative_bias(series: SwapQuoteSeries):
    """Time-series mean of ``(100 sqrt(rate) - VIX) / VIX``."""
    if np.any(series.vix <= 0):
        raise InvalidInputError("VIX must be positive at every point")
    return float(np.mean(series.bias))
