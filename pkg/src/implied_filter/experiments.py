"""Synthetic inversion experiments with Black-Scholes and Heston mixtures.

Every experiment returns a :class:`Bundle` of CSV-ready tables plus a summary
dictionary. Numbers are written with 12 significant digits.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import PRESET_NAMES, ExperimentConfig
from .exceptions import InvalidInputError
from .inversion import (
    Density,
    RegularizationConfig,
    select_alpha,
    tykhonov_invert,
)
from .matrix import QuoteSet, StateGrid, build_matrix, condition_diagnostics
from .params import FellerWarning, MarketState, ModelParams
from .pricing import bs_call_prices, heston_call_prices, implied_vols

__all__ = [
    "Bundle",
    "Table",
    "example_market",
    "moments_of",
    "round_prices",
    "run_bs_example",
    "run_conditioning_study",
    "run_experiment",
    "run_heston_example",
    "run_perturbation_study",
    "run_precision_study",
]

TAU = 10.0 / 252.0
FORWARD = 100.9662
SPOT = 100.0
HESTON_TRUTH = (2.0, 0.0225, 0.3, -0.6)
PERTURB_TRUE_RHO = -0.45


def example_market():
    """Spot 100 with the rate that puts the 10-day forward at 100.9662."""
    return MarketState(SPOT, math.log(FORWARD / SPOT) / TAU)


def round_prices(prices, decimals):
    """Round half away from zero; ``decimals=None`` leaves prices exact."""
    p = np.asarray(prices, dtype=float)
    if decimals is None:
        return p.copy()
    scale = 10.0**decimals
    return np.sign(p) * np.floor(np.abs(p) * scale + 0.5) / scale


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(u) for k, u in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return float(f"{v:.12g}") if math.isfinite(v) else None
    return v


@dataclass
class Table:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise InvalidInputError("row length does not match the table header")
        self.rows.append(tuple(values))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_fmt(v) for v in row])


@dataclass
class Bundle:
    """Named tables and a summary dictionary."""

    name: str
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for key, table in self.tables.items():
            table.write(os.path.join(out_dir, f"{self.name}_{key}.csv"))
        with open(os.path.join(out_dir, f"{self.name}_summary.json"), "w") as fh:
            json.dump(_jsonable(self.summary), fh, indent=2, sort_keys=True)


def _regularization(cfg: ExperimentConfig, alpha0_default):
    if cfg.preset is not None:
        return RegularizationConfig.preset(PRESET_NAMES[cfg.preset])
    return RegularizationConfig(
        alpha0_default if cfg.alpha0 is None else cfg.alpha0,
        cfg.alpha1 or 0.0,
        cfg.alpha2 or 0.0,
    )


def _quotes(mkt, strikes):
    return QuoteSet.from_prices(mkt, strikes, TAU, np.zeros(len(strikes)))


def _heston_params(rho, **changes):
    kappa, xbar, gamma_vol, _ = HESTON_TRUTH
    values = dict(kappa=kappa, xbar=xbar, gamma_vol=gamma_vol, rho=rho)
    values.update(changes)
    with warnings.catch_warnings():
        # perturbation studies step across the Feller boundary on purpose
        warnings.simplefilter("ignore", FellerWarning)
        return ModelParams.from_values(values["kappa"], values["xbar"], values["gamma_vol"],
                                       values["rho"])


def _prior(cfg: ExperimentConfig, grid: StateGrid, shape, scale):
    """Gamma prior on the grid, or a point mass at the node nearest its mean."""
    if cfg.prior == "point":
        mean = shape * scale
        return Density.point_mass(grid, int(np.argmin(np.abs(grid.points - mean))))
    if cfg.prior != "gamma":
        raise InvalidInputError(f"unknown prior {cfg.prior!r}")
    return Density.from_pdf(stats.gamma(shape, scale=scale).pdf, grid)


def _density_table(grid, truth, implied):
    t = Table(("state", "true_weight", "implied_weight"))
    for x, a, b in zip(grid.points, truth.weights, implied.weights):
        t.add(x, a, b)
    return t


def _inversion_summary(report, truth_mean, elapsed):
    return {
        "residual_sq": report.residual_sq,
        "residual_linf": report.residual_linf,
        "implied_mean": report.moments.mean,
        "mean_error": abs(report.moments.mean - truth_mean),
        "moments": report.moments.as_dict(),
        "kkt": report.kkt,
        "iterations": report.iterations,
        "runtime_s": elapsed,
    }


def run_bs_example(cfg: ExperimentConfig = ExperimentConfig(experiment="bs")) -> Bundle:
    """Gamma mixture of Black-Scholes volatilities, inverted over 61 strikes."""
    start = time.perf_counter()
    mkt = example_market()
    strikes = 59.0 + np.arange(1, 62)
    grid = StateGrid.uniform(cfg.grid_size or 61, cfg.grid_dx or 0.0082, "volatility")
    quotes = _quotes(mkt, strikes)
    C = build_matrix(None, quotes, grid, "black_scholes")
    truth = _prior(cfg, grid, 7.5, 0.02)
    if cfg.prior == "point":
        # no mixture: price at the exact mean, which need not be a grid node
        exact = bs_call_prices(mkt.spot, strikes, TAU, mkt.rate, [7.5 * 0.02])[:, 0]
    else:
        exact = C.entries @ truth.weights
    target = round_prices(exact, cfg.decimals)
    reg = _regularization(cfg, 1e-4)
    report = tykhonov_invert(C, target, reg, solver=cfg.solver)
    elapsed = time.perf_counter() - start

    smile = Table(("strike", "iv_target", "iv_fit"))
    iv_t = implied_vols(mkt, strikes, TAU, target)
    iv_f = implied_vols(mkt, strikes, TAU, C.entries @ report.density.weights)
    for k, a, b in zip(strikes, iv_t, iv_f):
        smile.add(k, a, b)
    diag = condition_diagnostics(C.entries)
    summary = _inversion_summary(report, truth.mean, elapsed)
    summary.update(
        true_mean=truth.mean,
        rank=diag.rank,
        cond=diag.cond,
        smile_min_strike=float(strikes[int(np.nanargmin(iv_t))]),
        alpha0=reg.alpha0,
    )
    return Bundle("bs", {"density": _density_table(grid, truth, report.density), "smile": smile},
                  summary)


def run_heston_example(cfg: ExperimentConfig = ExperimentConfig()) -> Bundle:
    """Gamma mixture of Heston prices over the variance state, 41 strikes."""
    start = time.perf_counter()
    mkt = example_market()
    strikes = 79.0 + np.arange(1, 42)
    grid = StateGrid.uniform(cfg.grid_size or 41, cfg.grid_dx or 0.0026, "variance")
    params = _heston_params(HESTON_TRUTH[3] if cfg.rho is None else cfg.rho)
    quotes = _quotes(mkt, strikes)
    C = build_matrix(params, quotes, grid, "heston")
    truth = _prior(cfg, grid, 4.0, 0.005)
    if cfg.prior == "point":
        exact = heston_call_prices(params, mkt.spot, strikes, TAU, mkt.rate,
                                   np.array([4.0 * 0.005]))[:, 0]
    else:
        exact = C.entries @ truth.weights
    target = round_prices(exact, cfg.decimals)
    reg = _regularization(cfg, 1e-4)
    report = tykhonov_invert(C, target, reg, solver=cfg.solver)
    elapsed = time.perf_counter() - start

    point = heston_call_prices(params, mkt.spot, strikes, TAU, mkt.rate,
                               np.array([truth.mean]))[:, 0]
    iv_t = implied_vols(mkt, strikes, TAU, target)
    iv_f = implied_vols(mkt, strikes, TAU, C.entries @ report.density.weights)
    iv_p = implied_vols(mkt, strikes, TAU, point)
    smile = Table(("strike", "iv_target", "iv_fit", "iv_point_mass"))
    for row in zip(strikes, iv_t, iv_f, iv_p):
        smile.add(*row)
    fwd = mkt.forward(TAU)
    atm = heston_call_prices(params, mkt.spot, fwd, TAU, mkt.rate, grid.points)[0] @ truth.weights
    diag = condition_diagnostics(C.entries)
    summary = _inversion_summary(report, truth.mean, elapsed)
    summary.update(
        true_mean=truth.mean,
        true_std=truth.moments().std,
        implied_std=report.moments.std,
        rank=diag.rank,
        cond=diag.cond,
        effective_rank=diag.effective_rank,
        atm_iv=float(implied_vols(mkt, [fwd], TAU, [atm])[0]),
        alpha0=reg.alpha0,
    )
    return Bundle("heston", {"density": _density_table(grid, truth, report.density),
                             "smile": smile}, summary)


def _heston_setup(rho):
    mkt = example_market()
    strikes = 79.0 + np.arange(1, 42)
    grid = StateGrid.uniform(41, 0.0026, "variance")
    quotes = _quotes(mkt, strikes)
    truth = Density.from_pdf(stats.gamma(4.0, scale=0.005).pdf, grid)
    return mkt, quotes, grid, truth


def run_precision_study(cfg: ExperimentConfig = ExperimentConfig(experiment="precision")) -> Bundle:
    """Sup-norm residual over an alpha grid for exact and penny-rounded prices."""
    rho = HESTON_TRUTH[3] if cfg.rho is None else cfg.rho
    _, quotes, grid, truth = _heston_setup(rho)
    C = build_matrix(_heston_params(rho), quotes, grid, "heston")
    exact = C.entries @ truth.weights
    table = Table(("alpha0", "decimals", "residual_linf", "residual_sq", "mean", "std"))
    summary = {"selected": {}}
    for decimals in (16, 2):
        target = round_prices(exact, decimals)
        sel = select_alpha(C, target, precision=0.5 * 10.0**-decimals,
                           alpha_grid=cfg.alpha_grid, solver=cfg.solver)
        for alpha in sorted(cfg.alpha_grid, reverse=True):
            rep = tykhonov_invert(C, target, RegularizationConfig(alpha), solver=cfg.solver)
            table.add(alpha, decimals, rep.residual_linf, rep.residual_sq, rep.moments.mean,
                      rep.moments.std)
        summary["selected"][str(decimals)] = {"alpha0": sel.alpha, "qualified": sel.qualified}
    return Bundle("precision", {"linf": table}, summary)


_PARAM_DEFAULTS = {"rho": PERTURB_TRUE_RHO, "gamma_vol": 0.3, "kappa": 2.0, "xbar": 0.0225}


def run_perturbation_study(cfg: ExperimentConfig = ExperimentConfig(experiment="perturb")
                           ) -> Bundle:
    """Moments and residuals when the matrix uses a perturbed model parameter.

    Target prices always come from the true parameters. Three regularizations
    are reported: ``(alpha0, 0)``, ``(alpha0, smoothing_alpha1)`` with exact
    prices, and ``rounded_alpha0`` with prices rounded to cents.
    """
    name = cfg.perturb_param
    if name not in _PARAM_DEFAULTS:
        raise InvalidInputError(f"cannot perturb {name!r}")
    true_rho = PERTURB_TRUE_RHO if cfg.rho is None else cfg.rho
    true_value = true_rho if name == "rho" else _PARAM_DEFAULTS[name]
    _, quotes, grid, truth = _heston_setup(true_rho)

    def params_at(value):
        changes = {name: value}
        rho = changes.pop("rho", true_rho)
        return _heston_params(rho, **changes)

    exact = build_matrix(params_at(true_value), quotes, grid, "heston").entries @ truth.weights
    alpha0 = 1e-6 if cfg.alpha0 is None else cfg.alpha0
    setups = [
        ("no_smoothing", RegularizationConfig(alpha0), None),
        ("smoothing", RegularizationConfig(alpha0, cfg.smoothing_alpha1), None),
    ]
    if cfg.include_rounded:
        setups.append(("rounded", RegularizationConfig(cfg.rounded_alpha0), 2))
    values = [true_value + d for d in cfg.perturb_deltas]
    values.insert(len(values) // 2, true_value)
    true_m = truth.moments()
    table = Table(("setup", "parameter", "value", "is_true", "mean", "std", "skew", "kurtosis",
                   "residual_sq", "residual_order", "kurtosis_rel_error"))
    for value in values:
        C = build_matrix(params_at(value), quotes, grid, "heston")
        for label, reg, decimals in setups:
            rep = tykhonov_invert(C, round_prices(exact, decimals), reg, solver=cfg.solver)
            m = rep.moments
            order = math.floor(math.log10(rep.residual_sq)) if rep.residual_sq > 0 else -math.inf
            table.add(label, name, value, value == true_value, m.mean, m.std, m.skew,
                      m.kurtosis, rep.residual_sq, order,
                      abs(m.kurtosis - true_m.kurtosis) / true_m.kurtosis)
    summary = {
        "parameter": name,
        "true_value": true_value,
        "true_moments": true_m.as_dict(),
        "values": values,
    }
    return Bundle(f"perturb_{name}", {"moments": table}, summary)


def run_conditioning_study(cfg: ExperimentConfig = ExperimentConfig(experiment="conditioning")
                           ) -> Bundle:
    """Singular-value spectra of the Black-Scholes and Heston example matrices."""
    mkt = example_market()
    bs = build_matrix(None, _quotes(mkt, 59.0 + np.arange(1, 62)),
                      StateGrid.uniform(61, 0.0082, "volatility"), "black_scholes")
    rho = HESTON_TRUTH[3] if cfg.rho is None else cfg.rho
    he = build_matrix(_heston_params(rho), _quotes(mkt, 79.0 + np.arange(1, 42)),
                      StateGrid.uniform(41, 0.0026, "variance"), "heston")
    table = Table(("matrix", "index", "singular_value"))
    summary = {}
    for label, C in (("black_scholes", bs), ("heston", he)):
        diag = condition_diagnostics(C.entries)
        for i, s in enumerate(diag.singular_values, 1):
            table.add(label, i, s)
        summary[label] = {"rank": diag.rank, "cond": diag.cond,
                          "effective_rank": diag.effective_rank}
    return Bundle("conditioning", {"singular_values": table}, summary)


_RUNNERS = {
    "bs": run_bs_example,
    "heston": run_heston_example,
    "precision": run_precision_study,
    "perturb": run_perturbation_study,
    "conditioning": run_conditioning_study,
}


def run_experiment(cfg: ExperimentConfig) -> Bundle:
    try:
        runner = _RUNNERS[cfg.experiment]
    except KeyError:
        raise InvalidInputError(f"unknown experiment {cfg.experiment!r}") from None
    return runner(cfg)


def moments_of(bundle_table: Table, setup, value):
    """Row of a perturbation table as a dict."""
    for row in bundle_table.rows:
        d = dict(zip(bundle_table.columns, row))
        if d["setup"] == setup and math.isclose(d["value"], value, abs_tol=1e-12):
            return d
    raise KeyError((setup, value))

