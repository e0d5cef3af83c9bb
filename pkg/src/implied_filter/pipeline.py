"""Daily calibration and inversion over option-chain files.

Chain CSV columns, in order: ``date, maturity_date, strike, type, bid, ask,
spot, underlying_id`` with ISO dates and ``type`` in ``{C, P}``. Times to
maturity are calendar days over 365; the short-maturity discard counts
business days.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import (
    CalibResult,
    calibrate,
    discount_rate_from_pcp,
    moneyness_weights,
    write_parameter_table,
)
from .config import ExperimentConfig
from .exceptions import EmptyChainError, ImpliedFilterError, InvalidInputError
from .experiments import Bundle, Table
from .filtering import simulate_heston_path
from .inversion import RegularizationConfig, tykhonov_invert
from .matrix import Quote, QuoteSet, StateGrid, build_matrix
from .params import MarketState, ModelParams, OptionKind, OptionSpec
from .pricing import heston_call_prices
from .variance import varswap_rate, vix_from_chain

__all__ = [
    "CHAIN_COLUMNS",
    "ChainRow",
    "chain_quote_set",
    "DayResult",
    "generate_synthetic_chains",
    "lad_fit",
    "maturity_cycle_overlay",
    "monthly_expirations",
    "read_chain_csv",
    "run_daily_pipeline",
    "write_chain_csv",
]

log = logging.getLogger(__name__)

CHAIN_COLUMNS = ("date", "maturity_date", "strike", "type", "bid", "ask", "spot", "underlying_id")
DAYS_PER_YEAR = 365.0
PIPELINE_GRID = (60, 0.0025)


@dataclass(frozen=True)
class ChainRow:
    date: dt.date
    maturity_date: dt.date
    strike: float
    kind: OptionKind
    bid: float
    ask: float
    spot: float
    underlying_id: str


def _parse_row(fields):
    if len(fields) != len(CHAIN_COLUMNS):
        raise ValueError(f"expected {len(CHAIN_COLUMNS)} columns, got {len(fields)}")
    date = dt.date.fromisoformat(fields[0].strip())
    mat = dt.date.fromisoformat(fields[1].strip())
    strike, bid, ask, spot = (float(fields[i]) for i in (2, 4, 5, 6))
    kind = {"C": OptionKind.CALL, "P": OptionKind.PUT}[fields[3].strip().upper()]
    if not (strike > 0 and spot > 0 and 0 <= bid <= ask) or not all(
            map(math.isfinite, (strike, bid, ask, spot))):
        raise ValueError("prices must satisfy 0 <= bid <= ask with positive strike and spot")
    if mat <= date:
        raise ValueError("maturity is not after the quote date")
    return ChainRow(date, mat, strike, kind, bid, ask, spot, fields[7].strip())


def read_chain_csv(path):
    """Parse a chain file, skipping malformed rows.

    Returns
    -------
    rows : list of ChainRow
    problems : list of (line_number, reason)
    """
    rows, problems = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, fields in enumerate(reader, 1):
            if not fields or (lineno == 1 and fields[0].strip() == "date"):
                continue
            try:
                rows.append(_parse_row(fields))
            except (ValueError, KeyError) as exc:
                problems.append((lineno, str(exc) or type(exc).__name__))
    return rows, problems


def write_chain_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CHAIN_COLUMNS)
        for r in rows:
            writer.writerow([r.date.isoformat(), r.maturity_date.isoformat(), f"{r.strike:g}",
                             "C" if r.kind is OptionKind.CALL else "P", f"{r.bid:.12g}",
                             f"{r.ask:.12g}", f"{r.spot:.12g}", r.underlying_id])


def business_days(start: dt.date, end: dt.date):
    return int(np.busday_count(start, end))


def _third_friday(year, month):
    first = dt.date(year, month, 1)
    return first + dt.timedelta(days=(4 - first.weekday()) % 7 + 14)


def monthly_expirations(start: dt.date, months):
    """Third Fridays of the months ``start.month + m`` for each ``m`` in ``months``."""
    out = []
    for m in months:
        idx = start.month - 1 + m
        out.append(_third_friday(start.year + idx // 12, idx % 12 + 1))
    return out


# ---------------------------------------------------------------------------
# Synthetic chains
# ---------------------------------------------------------------------------

def generate_synthetic_chains(start: dt.date, n_days, params: ModelParams, *, x0=0.02,
                              spot=100.0, rate=0.03, months=(1, 2, 3, 6, 12),
                              moneyness=(0.75, 1.25), strike_step=5.0, half_spread=0.05,
                              min_price=0.05, decimals=2, seed=0, underlying_id="SYN"):
    """Option chains priced from fixed parameters along a simulated state path.

    Spot and variance follow the physical dynamics day to day. Quotes are the
    model price widened by ``min(half_spread, price / 2)`` and rounded outward
    to ``decimals`` places; options worth less than ``min_price`` are not
    quoted.

    Returns
    -------
    rows : list of ChainRow
    states : list of (date, spot, x0)
    """
    dates = [d.astype(object) for d in
             np.busday_offset(np.datetime64(start), np.arange(n_days), roll="forward")]
    spots, xs = simulate_heston_path(params, x0, spot, n_days - 1, 1.0 / 252, seed=seed)
    scale = 10.0**decimals
    rows, states = [], []
    for date, s, x in zip(dates, spots, xs):
        s = round(float(s), 2)
        states.append((date, s, float(x)))
        lo = strike_step * math.ceil(moneyness[0] * s / strike_step)
        hi = strike_step * math.floor(moneyness[1] * s / strike_step)
        strikes = np.arange(lo, hi + strike_step / 2, strike_step)
        for mat in monthly_expirations(date, months):
            tau = (mat - date).days / DAYS_PER_YEAR
            calls = heston_call_prices(params, s, strikes, tau, rate, np.array([x]))[:, 0]
            puts = calls - s + strikes * math.exp(-rate * tau)
            for kind, prices in ((OptionKind.CALL, calls), (OptionKind.PUT, puts)):
                for k, p in zip(strikes, prices):
                    if p < min_price:
                        continue
                    # a spread proportional to cheap prices keeps the mid unbiased
                    hs = min(half_spread, 0.5 * p)
                    bid = math.floor((p - hs) * scale) / scale
                    ask = math.ceil((p + hs) * scale) / scale
                    rows.append(ChainRow(date, mat, float(k), kind, bid, ask, s, underlying_id))
    return rows, states


# ---------------------------------------------------------------------------
# Least absolute deviations
# ---------------------------------------------------------------------------

def lad_fit(t, y, tol=1e-8, max_iter=500):
    """Least-absolute-deviations line ``y ~ a + b t`` by iteratively reweighted LS.

    Returns
    -------
    a, b : float
        Intercept at ``t = 0`` and slope.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size != y.size or t.size == 0:
        raise InvalidInputError("t and y must be nonempty and of equal length")
    if t.size == 1 or np.ptp(t) == 0:
        return float(np.median(y)), 0.0
    origin = t.mean()
    X = np.column_stack([np.ones_like(t), t - origin])
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    floor = 1e-12 * max(np.max(np.abs(y)), 1.0)
    for _ in range(max_iter):
        w = 1.0 / np.maximum(np.abs(y - X @ coef), floor)
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        done = np.max(np.abs(new - coef)) <= tol * (1.0 + np.max(np.abs(coef)))
        coef = new
        if done:
            break
    a, b = float(coef[0]), float(coef[1])
    return a - b * origin, b


def maturity_cycle_overlay(dates, values, expirations):
    """Piecewise LAD lines between consecutive expiration dates.

    Returns fitted values aligned with ``dates``.
    """
    dates = list(dates)
    y = np.asarray(values, dtype=float)
    exps = sorted(set(expirations))
    ordinal = np.array([d.toordinal() for d in dates], dtype=float)
    fitted = np.full(y.size, np.nan)
    bounds = [dt.date.min] + exps + [dt.date.max]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [i for i, d in enumerate(dates) if lo <= d < hi]
        if not idx:
            continue
        a, b = lad_fit(ordinal[idx], y[idx])
        fitted[idx] = a + b * ordinal[idx]
    return fitted


# ---------------------------------------------------------------------------
# Daily processing
# ---------------------------------------------------------------------------

@dataclass
class DayResult:
    date: dt.date
    calib: CalibResult
    rates: dict
    moments: dict  # method -> Moments or dict
    swap: dict  # method -> model swap rate
    vix: float
    vix_tau: float
    n_quotes: int
    n_dropped: int = 0
    notes: list = field(default_factory=list)


def _day_quotes(rows, min_business_days):
    date = rows[0].date
    spot = rows[0].spot
    keep = [r for r in rows if business_days(date, r.maturity_date) >= min_business_days]
    if not keep:
        raise EmptyChainError(f"{date}: every maturity is under {min_business_days} business days")
    by_mat = defaultdict(list)
    for r in keep:
        by_mat[(r.maturity_date - date).days / DAYS_PER_YEAR].append(r)
    return date, spot, by_mat


def _maturity_rates(mkt, by_mat, fallback):
    rates = {}
    for tau, rs in by_mat.items():
        calls = [Quote(OptionSpec(r.strike, tau, OptionKind.CALL), r.bid, r.ask)
                 for r in rs if r.kind is OptionKind.CALL]
        puts = [Quote(OptionSpec(r.strike, tau, OptionKind.PUT), r.bid, r.ask)
                for r in rs if r.kind is OptionKind.PUT]
        try:
            fit = discount_rate_from_pcp(QuoteSet(tuple(calls), mkt), QuoteSet(tuple(puts), mkt))
            rates[tau] = (fit.rate, fit.stderr, "parity")
        except (ImpliedFilterError, ValueError):
            rates[tau] = None
    fitted = sorted((t, v[0]) for t, v in rates.items() if v is not None)
    for tau, v in rates.items():
        if v is not None:
            continue
        if fitted:
            # linear in maturity between parity fits, flat beyond them
            t, r = zip(*fitted)
            rates[tau] = (float(np.interp(tau, t, r)), math.nan, "interpolated")
        else:
            rates[tau] = (fallback, math.nan, "fallback")
    return rates


def chain_quote_set(rows, min_business_days=7, fallback_rate=0.0):
    """Quotes of one date with short maturities removed and parity discount rates.

    Returns
    -------
    quotes : QuoteSet
        Maturities are in years from the quote date.
    rates : dict
        ``tau -> (rate, stderr, source)``. Source is ``parity`` when the
        maturity's own regression succeeds, ``interpolated`` when its rate is
        taken from other maturities' fits, and ``fallback`` when no maturity
        admits a regression.
    """
    if len({r.date for r in rows}) != 1:
        raise InvalidInputError("rows must share one quote date")
    _, spot, by_mat = _day_quotes(rows, min_business_days)
    mkt = MarketState(spot)
    rates = _maturity_rates(mkt, by_mat, fallback_rate)
    quotes = [Quote(OptionSpec(r.strike, tau, r.kind), r.bid, r.ask)
              for tau, rs in sorted(by_mat.items()) for r in rs]
    return QuoteSet(tuple(quotes), mkt, {tau: v[0] for tau, v in rates.items()}), rates


def process_day(rows, cfg: ExperimentConfig, prev: Optional[CalibResult] = None,
                grid: Optional[StateGrid] = None) -> DayResult:
    qs, rates = chain_quote_set(rows, cfg.min_business_days, cfg.fallback_rate)
    date, spot = rows[0].date, qs.mkt.spot
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        weights = moneyness_weights(qs, scale=cfg.moneyness_scale)
    # the chain still carries quotes the weighting dropped; calibrate skips them
    n_dropped = int((~weights.kept).sum())
    used = qs.subset(weights.kept)
    # only mu_phys is taken from here
    base = ModelParams.from_values(2.0, 0.04, 0.3, -0.5, mu_phys=cfg.mu_phys)
    calib = calibrate(qs, weights, cfg.model, init=prev,
                      n_restarts=cfg.n_restarts if prev is None else cfg.warm_restarts,
                      seed=cfg.seed, min_business_days=0, base_params=base,
                      max_iter=cfg.calib_max_iter, xatol=cfg.calib_xatol, fatol=cfg.calib_fatol)

    grid = grid or StateGrid.uniform(cfg.grid_size or PIPELINE_GRID[0],
                                     cfg.grid_dx or PIPELINE_GRID[1], "variance")
    C = build_matrix(calib.params, used, grid, cfg.model)
    tau_star = cfg.tau_star_days / DAYS_PER_YEAR
    # VIX from the maturity nearest the swap horizon, compared at that maturity
    vix_tau = min(rates, key=lambda t: abs(t - tau_star))
    vix_quotes = qs.subset(qs.taus == vix_tau)
    fwd = spot * math.exp(rates[vix_tau][0] * vix_tau)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vix = vix_from_chain(vix_quotes, fwd)

    moments = {"x0": {"mean": calib.x0, "std": 0.0, "skew": math.nan, "kurtosis": math.nan}}
    swap = {"x0": varswap_rate(calib.params, calib.x0, vix_tau)}
    for degree in (0, 1, 2):
        reg = RegularizationConfig.preset(degree, row_weights=weights.weights)
        rep = tykhonov_invert(C, used.mids, reg)
        moments[f"d{degree}"] = rep.moments.as_dict()
        swap[f"d{degree}"] = varswap_rate(calib.params, rep.moments.mean, vix_tau)
    return DayResult(date, calib, rates, moments, swap, vix, vix_tau, len(used), n_dropped,
                     [str(w.message) for w in caught][:5])


def run_daily_pipeline(chain_files, cfg: ExperimentConfig = ExperimentConfig(experiment="pipeline"),
                       out_dir=None) -> Bundle:
    """Process every quote date found in ``chain_files`` in date order.

    Days that cannot be processed (all maturities too short, no usable quotes)
    are skipped and listed in the summary, as are malformed rows.
    """
    by_date = defaultdict(list)
    problems = {}
    for path in chain_files:
        rows, bad = read_chain_csv(path)
        problems[os.fspath(path)] = bad
        for r in rows:
            by_date[r.date].append(r)
    grid = StateGrid.uniform(cfg.grid_size or PIPELINE_GRID[0], cfg.grid_dx or PIPELINE_GRID[1],
                             "variance")
    days, skipped = [], []
    prev = None
    for date in sorted(by_date):
        try:
            res = process_day(by_date[date], cfg, prev, grid)
        except (EmptyChainError, InvalidInputError) as exc:
            warnings.warn(f"skipping {date}: {exc}", stacklevel=2)
            skipped.append((date.isoformat(), str(exc)))
            continue
        days.append(res)
        prev = res.calib
        log.info("processed %s: residual %.3g", date, res.calib.weighted_residual)

    bundle = _bundle(days)
    bundle.summary.update(
        days=len(days),
        skipped=skipped,
        malformed_rows={k: [list(p) for p in v] for k, v in problems.items()},
        parameter_deviation=_max_relative_deviation(days),
    )
    if out_dir is not None:
        bundle.write(out_dir)
        write_parameter_table([(d.date.isoformat(), d.calib) for d in days],
                              os.path.join(out_dir, "pipeline_parameters_table.csv"))
    return bundle


def _max_relative_deviation(days):
    """Largest relative deviation of each parameter from its series mean."""
    if not days:
        return {}
    table = defaultdict(list)
    for d in days:
        for k, v in d.calib.params.as_dict().items():
            if k not in ("mu_phys", "vol_risk_premium"):
                table[k].append(v)
    out = {}
    for k, vals in table.items():
        v = np.asarray(vals, dtype=float)
        m = v.mean()
        out[k] = float(np.max(np.abs(v - m)) / abs(m)) if m != 0 else float(np.max(np.abs(v)))
    return out


def _bundle(days):
    params = Table(("date", "kappa", "xbar", "gamma_vol", "rho", "lambda_j", "mu_j", "sigma_j",
                    "x0", "weighted_residual", "converged", "feller_active"))
    moments = Table(("date", "method", "mean", "std", "skew", "kurtosis"))
    swap = Table(("date", "method", "tau", "model_rate", "vix", "bias"))
    rates = Table(("date", "tau", "rate", "stderr", "source"))
    overlay = Table(("date", "method", "mean", "lad_fit"))
    for d in days:
        p = d.calib.params.as_dict()
        params.add(d.date.isoformat(), p["kappa"], p["xbar"], p["gamma_vol"], p["rho"],
                   p.get("lambda_j", 0.0), p.get("mu_j", 0.0), p.get("sigma_j", 0.0), d.calib.x0,
                   d.calib.weighted_residual, d.calib.converged, d.calib.feller_active)
        for method, m in d.moments.items():
            moments.add(d.date.isoformat(), method, m["mean"], m["std"], m["skew"], m["kurtosis"])
        for method, rate in d.swap.items():
            swap.add(d.date.isoformat(), method, d.vix_tau, rate, d.vix,
                     (100.0 * math.sqrt(rate) - d.vix) / d.vix if d.vix > 0 else math.nan)
        for tau, (r, se, src) in sorted(d.rates.items()):
            rates.add(d.date.isoformat(), tau, r, se, src)
    if days:
        dates = [d.date for d in days]
        exps = monthly_expirations(dates[0], range(0, (dates[-1].year - dates[0].year) * 12
                                                   + dates[-1].month - dates[0].month + 2))
        for method in days[0].moments:
            series = [d.moments[method]["mean"] for d in days]
            fit = maturity_cycle_overlay(dates, series, exps)
            for date, y, f in zip(dates, series, fit):
                overlay.add(date.isoformat(), method, y, f)
    return Bundle("pipeline", {"parameters": params, "moments": moments, "swap": swap,
                               "rates": rates, "overlay": overlay}, {})
