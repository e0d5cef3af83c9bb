"""Point-state calibration of Heston (optionally with jumps) to an option chain.

The objective is the weighted squared distance between bid/ask midpoints and
model prices evaluated at a single variance state ``x0``. Optimization runs
Nelder-Mead in an unconstrained space where the Feller ratio
``gamma**2 / (2 kappa xbar)`` enters through a logistic map, so every iterate
satisfies the Feller condition.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_1d, check_positive
from .exceptions import EmptyChainError, InvalidInputError, InvalidRegressionError
from .matrix import Quote, QuoteSet
from .params import MarketState, ModelParams, OptionKind, OptionSpec
from .pricing import heston_call_prices, implied_vol

__all__ = [
    "CalibResult",
    "HestonCalibrator",
    "PCPRate",
    "WeightScheme",
    "calibrate",
    "discard_short_maturities",
    "discount_rate_from_pcp",
    "moneyness_weights",
    "write_parameter_table",
]

MONEYNESS_SCALE = 10.0
MIN_BUSINESS_DAYS = 7
TRADING_DAYS = 252
DEFAULT_RESTARTS = 8
FELLER_ACTIVE_TOL = 1e-3
HESTON_NAMES = ("kappa", "xbar", "gamma_vol", "rho")
JUMP_NAMES = ("lambda_j", "mu_j", "sigma_j")


class QuoteDroppedWarning(UserWarning):
    """A quote was excluded from the weighting scheme."""


@dataclass(frozen=True)
class WeightScheme:
    """Positive quote weights normalized to sum to the number of kept quotes.

    ``kept`` flags which quotes of the original chain received a weight.
    """

    weights: np.ndarray
    kept: np.ndarray

    def __post_init__(self):
        w = as_1d(self.weights, "weights")
        if w.size == 0:
            raise EmptyChainError("no quotes left to weight")
        if np.any(w <= 0):
            raise InvalidInputError("weights must be positive")
        w = w * (w.size / w.sum())
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        kept = np.asarray(self.kept, dtype=bool).copy()
        if kept.sum() != w.size:
            raise InvalidInputError("kept mask does not match the number of weights")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @classmethod
    def uniform(cls, n):
        return cls(np.ones(n), np.ones(n, dtype=bool))


def moneyness_weights(quotes: QuoteSet, rates=None, scale=MONEYNESS_SCALE) -> WeightScheme:
    """Weights favouring at-the-money quotes with tight implied-vol spreads.

    ``w_i = exp(-(scale * log(exp(-r tau) K / S))**2) / (iv_ask - iv_bid)``.
    Quotes whose bid or ask has no implied volatility, or whose spread in
    volatility is not positive, are dropped with a warning.

    Parameters
    ----------
    rates : dict, optional
        Maturity to discount rate; defaults to the rates carried by ``quotes``.

    Raises
    ------
    EmptyChainError
        If every quote is dropped.
    """
    raw = []
    kept = []
    for q in quotes:
        r = float(rates[q.opt.maturity]) if rates and q.opt.maturity in rates \
            else quotes.rate_for(q.opt.maturity)
        mkt = MarketState(quotes.mkt.spot, r, quotes.mkt.time_now)
        tau = q.opt.tau(mkt)
        try:
            spread = implied_vol(mkt, q.opt, q.ask) - implied_vol(mkt, q.opt, q.bid)
        except (InvalidInputError, ValueError, ArithmeticError):
            spread = math.nan
        if not spread > 0:
            warnings.warn(f"dropping quote {q.label}: no usable implied-vol spread",
                          QuoteDroppedWarning, stacklevel=2)
            kept.append(False)
            continue
        m = math.log(math.exp(-r * tau) * q.opt.strike / quotes.mkt.spot)
        raw.append(math.exp(-(scale * m) ** 2) / spread)
        kept.append(True)
    if not raw:
        raise EmptyChainError("every quote was dropped while computing weights")
    return WeightScheme(np.array(raw), np.array(kept))


def discard_short_maturities(quotes: QuoteSet, min_business_days=MIN_BUSINESS_DAYS,
                             days_per_year=TRADING_DAYS) -> QuoteSet:
    """Drop quotes expiring within ``min_business_days`` (time measured in years)."""
    keep = quotes.taus >= min_business_days / days_per_year - 1e-12
    if not keep.any():
        raise EmptyChainError("every quote matures too soon")
    return quotes.subset(keep)


@dataclass(frozen=True)
class PCPRate:
    rate: float
    a1: float
    a2: float
    stderr: float


def discount_rate_from_pcp(calls: QuoteSet, puts: QuoteSet, spot=None) -> PCPRate:
    """Discount rate implied by the parity regression ``P - C + S = a1 K + a2``.

    ``rate = -log(a1) / tau``; ``stderr`` is the delta-method standard error
    of the rate.

    Raises
    ------
    InvalidInputError
        Fewer than three strikes quoted on both sides, or mixed maturities.
    InvalidRegressionError
        If the fitted slope is not positive.
    """
    spot = calls.mkt.spot if spot is None else check_positive(spot, "spot")
    mats = set(calls.maturities) | set(puts.maturities)
    if len(mats) != 1:
        raise InvalidInputError("calls and puts must share a single maturity")
    call_mid = {q.opt.strike: q.mid for q in calls if q.opt.kind is OptionKind.CALL}
    put_mid = {q.opt.strike: q.mid for q in puts if q.opt.kind is OptionKind.PUT}
    strikes = np.array(sorted(set(call_mid) & set(put_mid)))
    if strikes.size < 3:
        raise InvalidInputError(f"need at least 3 matched strikes, got {strikes.size}")
    y = np.array([put_mid[k] - call_mid[k] + spot for k in strikes])
    X = np.column_stack([strikes, np.ones_like(strikes)])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < 2:
        raise InvalidRegressionError("strikes do not identify the regression")
    a1, a2 = float(coef[0]), float(coef[1])
    if a1 <= 0:
        raise InvalidRegressionError(f"fitted discount factor {a1} is not positive")
    tau = float(next(iter(mats))) - calls.mkt.time_now
    if tau <= 0:
        raise InvalidInputError("maturity must be after the quote time")
    dof = strikes.size - 2
    resid = y - X @ coef
    if dof > 0:
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.inv(X.T @ X)
        se_a1 = math.sqrt(max(cov[0, 0], 0.0))
    else:
        se_a1 = 0.0
    return PCPRate(-math.log(a1) / tau, a1, a2, se_a1 / (a1 * tau))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibResult:
    x0: float
    params: ModelParams
    weighted_residual: float
    converged: bool
    feller_active: bool
    restarts: tuple = field(default=(), repr=False)  # (objective, converged) per start
    n_evals: int = 0

    def as_dict(self):
        return {
            "x0": self.x0,
            **self.params.as_dict(),
            "weighted_residual": self.weighted_residual,
            "converged": self.converged,
            "feller_active": self.feller_active,
            "restarts": [list(r) for r in self.restarts],
            "n_evals": self.n_evals,
        }

    def to_json(self, path_or_buf=None):
        def fmt(v):
            if isinstance(v, float):
                return float(f"{v:.12g}") if math.isfinite(v) else None
            if isinstance(v, list):
                return [fmt(u) for u in v]
            return v

        text = json.dumps({k: fmt(v) for k, v in self.as_dict().items()}, indent=2)
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
        return None


class _Transform:
    """Map between model parameters and an unconstrained vector.

    Coordinates: log kappa, log xbar, logit((rho + 1) / 2), logit(feller ratio),
    log x0 and, with jumps, log lambda, log(1 + mu), log sigma. Fixed parameters
    are removed from the vector.
    """

    def __init__(self, with_jumps, fixed):
        self.with_jumps = with_jumps
        self.names = ["kappa", "xbar", "rho", "feller", "x0"]
        if with_jumps:
            self.names += ["lambda_j", "mu_j", "sigma_j"]
        self.fixed = dict(fixed or {})
        unknown = set(self.fixed) - set(HESTON_NAMES) - set(JUMP_NAMES) - {"x0"}
        if unknown:
            raise InvalidInputError(f"cannot fix unknown parameters {sorted(unknown)}")
        if "gamma_vol" in self.fixed:
            raise InvalidInputError("gamma_vol cannot be fixed; it is tied to the Feller ratio")
        self.free = [n for n in self.names if n not in self.fixed]

    def to_natural(self, z):
        vals = dict(zip(self.free, z))

        def pick(name, inverse):
            return float(self.fixed[name]) if name in self.fixed else inverse(vals[name])

        out = {
            "kappa": pick("kappa", math.exp),
            "xbar": pick("xbar", math.exp),
            "rho": pick("rho", lambda v: 2.0 * expit(v) - 1.0),
            "x0": pick("x0", math.exp),
        }
        feller = expit(vals["feller"])
        out["gamma_vol"] = math.sqrt(2.0 * out["kappa"] * out["xbar"] * feller)
        if self.with_jumps:
            out["lambda_j"] = pick("lambda_j", math.exp)
            out["mu_j"] = pick("mu_j", math.expm1)
            out["sigma_j"] = pick("sigma_j", math.exp)
        return out

    def to_unconstrained(self, nat):
        feller = nat["gamma_vol"] ** 2 / (2.0 * nat["kappa"] * nat["xbar"])
        feller = min(max(feller, 1e-6), 1.0 - 1e-6)
        full = {
            "kappa": math.log(nat["kappa"]),
            "xbar": math.log(nat["xbar"]),
            "rho": float(logit((min(max(nat["rho"], -0.999), 0.999) + 1.0) / 2.0)),
            "feller": float(logit(feller)),
            "x0": math.log(max(nat["x0"], 1e-8)),
        }
        if self.with_jumps:
            full["lambda_j"] = math.log(max(nat["lambda_j"], 1e-8))
            full["mu_j"] = math.log1p(nat["mu_j"])
            full["sigma_j"] = math.log(max(nat["sigma_j"], 1e-8))
        return np.array([full[n] for n in self.free])

    def params(self, nat, base: Optional[ModelParams]):
        kwargs = {}
        if base is not None:
            kwargs = dict(mu_phys=base.mu_phys, vol_risk_premium=base.vol_risk_premium)
        jumps = {}
        if self.with_jumps:
            jumps = dict(lambda_j=nat["lambda_j"], mu_j=nat["mu_j"], sigma_j=nat["sigma_j"])
        return ModelParams.from_values(nat["kappa"], nat["xbar"], nat["gamma_vol"], nat["rho"],
                                       **jumps, **kwargs)


def _default_start(with_jumps):
    nat = {"kappa": 2.0, "xbar": 0.04, "gamma_vol": 0.3, "rho": -0.5, "x0": 0.04}
    if with_jumps:
        nat.update(lambda_j=0.1, mu_j=-0.05, sigma_j=0.1)
    return nat


def _natural_from(init, with_jumps):
    if init is None:
        return _default_start(with_jumps)
    if isinstance(init, CalibResult):
        nat = {"x0": init.x0, **init.params.as_dict()}
    elif isinstance(init, dict):
        nat = dict(init)
    else:
        raise InvalidInputError("init must be a CalibResult or a dict")
    start = _default_start(with_jumps)
    start.update({k: v for k, v in nat.items() if k in start})
    return start


class _Objective:
    def __init__(self, quotes: QuoteSet, weights, with_jumps, transform, base, bounds):
        self.spot = quotes.mkt.spot
        self.strikes = quotes.strikes
        self.taus = quotes.taus
        self.rates = quotes.rate_vector
        self.puts = ~quotes.is_call
        self.parity = self.spot - self.strikes * np.exp(-self.rates * self.taus)
        self.mids = quotes.mids
        self.weights = weights
        self.with_jumps = with_jumps
        self.transform = transform
        self.base = base
        self.bounds = bounds or {}
        self.n_evals = 0

    def prices(self, nat):
        params = self.transform.params(nat, self.base)
        calls = heston_call_prices(params, self.spot, self.strikes, self.taus, self.rates,
                                   np.array([nat["x0"]]))[:, 0]
        return np.where(self.puts, np.maximum(calls - self.parity, 0.0), calls)

    def natural(self, z):
        return self.transform.to_natural(z)

    def __call__(self, z):
        self.n_evals += 1
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 50:
            return 1e30
        nat = self.natural(z)
        for name, (lo, hi) in self.bounds.items():
            if name in nat and not lo <= nat[name] <= hi:
                return 1e30
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = self.prices(nat)
        except (InvalidInputError, ArithmeticError, ValueError):
            return 1e30
        resid = model - self.mids
        val = float(self.weights @ (resid * resid))
        return val if math.isfinite(val) else 1e30


def calibrate(quotes: QuoteSet, weights: Optional[WeightScheme] = None, model="heston",
              init=None, bounds=None, *, fixed=None, n_restarts=DEFAULT_RESTARTS, seed=0,
              max_iter=4000, scout_iter=300, xatol=1e-9, fatol=1e-16, n_jobs=1,
              min_business_days=MIN_BUSINESS_DAYS, base_params: Optional[ModelParams] = None
              ) -> CalibResult:
    """Fit ``(x0, theta)`` by weighted least squares on bid/ask midpoints.

    Parameters
    ----------
    quotes : QuoteSet
    weights : WeightScheme, optional
        Defaults to uniform weights. Quotes not flagged in ``weights.kept`` are
        ignored.
    model : {"heston", "heston_jumps"}
    init : CalibResult or dict, optional
        First starting point. Further starts perturb it randomly.
    bounds : dict, optional
        ``name -> (lo, hi)`` box on natural parameters (``x0`` included).
    fixed : dict, optional
        Parameters held at given values, e.g. ``{"lambda_j": 0.0}``.
    n_restarts : int
        Total number of starting points; each gets ``scout_iter`` Nelder-Mead
        iterations and the best is then polished with up to ``max_iter``.
    min_business_days : int
        Quotes expiring sooner are discarded.
    base_params : ModelParams, optional
        Supplies ``mu_phys`` and ``vol_risk_premium`` for the result.

    Returns
    -------
    CalibResult
        The best start; ``converged`` is False when Nelder-Mead stopped on its
        iteration budget.
    """
    if model not in ("heston", "heston_jumps"):
        raise InvalidInputError(f"unknown model {model!r}")
    with_jumps = model == "heston_jumps"
    if weights is None:
        weights = WeightScheme.uniform(len(quotes))
    if weights.kept.size != len(quotes):
        raise InvalidInputError("weight scheme does not match the quote set")
    used = quotes.subset(weights.kept)
    w = np.asarray(weights.weights)
    if min_business_days:
        keep = used.taus >= min_business_days / TRADING_DAYS - 1e-12
        if not keep.any():
            raise EmptyChainError("every quote matures too soon")
        used = used.subset(keep)
        w = w[keep]
    transform = _Transform(with_jumps, fixed)
    obj = _Objective(used, w, with_jumps, transform, base_params, bounds)

    start_nat = _natural_from(init, with_jumps)
    z0 = transform.to_unconstrained(start_nat)
    rng = np.random.default_rng(seed)
    starts = [z0] + [z0 + rng.normal(0.0, 0.5, z0.size) for _ in range(max(n_restarts, 1) - 1)]
    f0 = obj(z0)

    # every start gets a short exploratory run; only the best one is polished
    scout = dict(maxiter=scout_iter, maxfev=2 * scout_iter, xatol=1e-5, fatol=1e-14,
                 adaptive=True)
    polish = dict(maxiter=max_iter, maxfev=2 * max_iter, xatol=xatol, fatol=fatol,
                  adaptive=True)

    def run(z):
        local = _Objective(used, w, with_jumps, transform, base_params, bounds)
        res = optimize.minimize(local, z, method="Nelder-Mead", options=scout)
        return res.x, float(res.fun), bool(res.success), local.n_evals

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(run, starts))
    else:
        runs = [run(z) for z in starts]
    k = int(np.argmin([r[1] for r in runs]))
    z_best, f_best = runs[k][0], runs[k][1]
    ok = False
    for _ in range(2):
        # a second pass rebuilds the simplex around the best vertex
        res = optimize.minimize(obj, z_best, method="Nelder-Mead", options=polish)
        ok = bool(res.success)
        if res.fun <= f_best:
            z_best, f_best = res.x, float(res.fun)
    if f_best > f0:
        z_best, f_best, ok = z0, f0, False
    nat = transform.to_natural(z_best)
    params = transform.params(nat, base_params)
    return CalibResult(
        x0=float(nat["x0"]),
        params=params,
        weighted_residual=f_best,
        converged=ok,
        feller_active=bool(params.heston.feller_ratio > 1.0 - FELLER_ACTIVE_TOL),
        restarts=tuple((r[1], r[2]) for r in runs),
        n_evals=obj.n_evals + sum(r[3] for r in runs),
    )


def model_prices(result: CalibResult, quotes: QuoteSet):
    """Model prices of ``quotes`` at the calibrated point state."""
    spot = quotes.mkt.spot
    strikes, taus, rates = quotes.strikes, quotes.taus, quotes.rate_vector
    calls = heston_call_prices(result.params, spot, strikes, taus, rates,
                               np.array([result.x0]))[:, 0]
    parity = spot - strikes * np.exp(-rates * taus)
    return np.where(quotes.is_call, calls, np.maximum(calls - parity, 0.0))


def write_parameter_table(rows, path_or_buf=None, with_jumps=None):
    """Per-day parameter table; ``rows`` is an iterable of ``(date, CalibResult)``."""
    rows = list(rows)
    if with_jumps is None:
        with_jumps = any(r.params.jumps is not None for _, r in rows)
    header = ["date", "kappa", "xbar", "gamma_vol", "rho"]
    if with_jumps:
        header += ["lambda_j", "mu_j", "sigma_j"]
    header += ["x0", "weighted_residual"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for date, res in rows:
        d = {"x0": res.x0, "weighted_residual": res.weighted_residual, **res.params.as_dict()}
        writer.writerow([str(date)] + [f"{d.get(h, 0.0):.12g}" for h in header[1:]])
    text = buf.getvalue()
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)
    return None


class HestonCalibrator(RegressorMixin, BaseEstimator):
    """Point-state Heston calibration with the scikit-learn interface.

    ``X`` has columns ``[spot, strike, tau, rate, is_call]`` (one spot for the
    whole chain) and ``y`` holds mid prices. ``predict`` returns model prices.

    Parameters
    ----------
    model : {"heston", "heston_jumps"}
    n_restarts : int
    seed : int
    min_business_days : int
    """

    def __init__(self, model="heston", n_restarts=DEFAULT_RESTARTS, seed=0,
                 min_business_days=MIN_BUSINESS_DAYS, max_iter=4000):
        self.model = model
        self.n_restarts = n_restarts
        self.seed = seed
        self.min_business_days = min_business_days
        self.max_iter = max_iter

    @staticmethod
    def _quotes(X, y=None):
        spots = np.unique(X[:, 0])
        if spots.size != 1:
            raise InvalidInputError("all rows must share one spot price")
        mkt = MarketState(float(spots[0]))
        prices = np.zeros(X.shape[0]) if y is None else y
        rates = {}
        quotes = []
        for (_, k, tau, r, is_call), p in zip(X, prices):
            rates[float(tau)] = float(r)
            kind = OptionKind.CALL if is_call else OptionKind.PUT
            quotes.append(Quote(OptionSpec(float(k), float(tau), kind), mid=float(p)))
        return QuoteSet(tuple(quotes), mkt, rates)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if X.shape[1] != 5:
            raise InvalidInputError("X needs columns [spot, strike, tau, rate, is_call]")
        quotes = self._quotes(X, y)
        weights = None
        if sample_weight is not None:
            weights = WeightScheme(sample_weight, np.ones(len(quotes), dtype=bool))
        self.result_ = calibrate(quotes, weights, self.model, n_restarts=self.n_restarts,
                                 seed=self.seed, max_iter=self.max_iter,
                                 min_business_days=self.min_business_days)
        self.params_ = self.result_.params
        self.x0_ = self.result_.x0
        self.n_features_in_ = 5
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        return model_prices(self.result_, self._quotes(X))
