"""Command-line interface.

Every subcommand writes CSV or JSON with 12 significant digits. Experiment and
pipeline settings come from a ``key=value`` file (``--config``) and repeated
``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import math
import sys

import numpy as np

from .calibration import calibrate, moneyness_weights
from .config import load_config
from .exceptions import ImpliedFilterError
from .experiments import run_experiment
from .filtering import HestonParticleFilter
from .inversion import RegularizationConfig, select_alpha, tykhonov_invert
from .matrix import QuoteSet, StateGrid, build_matrix, condition_diagnostics, read_matrix_csv, \
    write_matrix_csv
from .params import MarketState, ModelParams, OptionKind, OptionSpec
from .pipeline import (
    chain_quote_set,
    generate_synthetic_chains,
    read_chain_csv,
    run_daily_pipeline,
    write_chain_csv,
)
from .pricing import bs_price, heston_price
from .variance import varswap_rate, vix_from_chain

__all__ = ["build_parser", "main"]


def _g(v):
    return float(f"{v:.12g}") if isinstance(v, float) and math.isfinite(v) else v


def _round(obj):
    if isinstance(obj, (float, np.floating)):
        return _g(float(obj))
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_round(v) for v in obj]
    return obj


def _dump(obj, out=None):
    text = json.dumps(_round(obj), indent=2, default=str, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _floats(text):
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        return np.arange(start, stop + step / 2, step)
    return np.array([float(v) for v in text.split(",") if v.strip()])


def _read_column(path):
    """Last numeric column of a CSV, skipping a header row."""
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                vals.append(float(line.split(",")[-1]))
            except ValueError:
                if vals:
                    raise
    return np.array(vals)


def _add_model_args(p, with_state=True):
    p.add_argument("--kappa", type=float, default=2.0)
    p.add_argument("--xbar", type=float, default=0.0225)
    p.add_argument("--gamma-vol", type=float, default=0.3)
    p.add_argument("--rho", type=float, default=-0.6)
    p.add_argument("--lambda-j", type=float, default=None, help="jump intensity; omit for no jumps")
    p.add_argument("--mu-j", type=float, default=0.0)
    p.add_argument("--sigma-j", type=float, default=0.0)
    p.add_argument("--mu-phys", type=float, default=0.05)
    if with_state:
        p.add_argument("--x0", type=float, default=0.02, help="current variance")


def _params(a):
    return ModelParams.from_values(a.kappa, a.xbar, a.gamma_vol, a.rho, a.lambda_j, a.mu_j,
                                   a.sigma_j, mu_phys=a.mu_phys)


def _add_market_args(p):
    p.add_argument("--spot", type=float, default=100.0)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=10 / 252, help="years to maturity")


def _add_reg_args(p):
    p.add_argument("--preset", choices=("d0", "d1", "d2"))
    p.add_argument("--alpha0", type=float, default=1e-4)
    p.add_argument("--alpha1", type=float, default=0.0)
    p.add_argument("--alpha2", type=float, default=0.0)


def _reg(a):
    if getattr(a, "preset", None):
        return RegularizationConfig.preset(int(a.preset[1]))
    return RegularizationConfig(a.alpha0, a.alpha1, a.alpha2)


def _day_rows(path, date):
    rows, problems = read_chain_csv(path)
    for lineno, reason in problems:
        logging.warning("%s:%d skipped: %s", path, lineno, reason)
    dates = sorted({r.date for r in rows})
    if not dates:
        raise ImpliedFilterError(f"{path} has no valid rows")
    day = dt.date.fromisoformat(date) if date else dates[0]
    return [r for r in rows if r.date == day]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_price(a):
    mkt = MarketState(a.spot, a.rate)
    kind = OptionKind.parse(a.kind)
    print("strike,price")
    for k in _floats(a.strikes):
        opt = OptionSpec(float(k), a.tau, kind)
        if a.model == "bs":
            p = bs_price(mkt, opt, a.sigma)
        else:
            p = heston_price(_params(a), mkt, opt, a.x0)
        print(f"{k:.12g},{p:.12g}")


def cmd_build_matrix(a):
    mkt = MarketState(a.spot, a.rate)
    strikes = _floats(a.strikes)
    quotes = QuoteSet.from_prices(mkt, strikes, a.tau, np.zeros(strikes.size))
    meaning = "volatility" if a.model == "bs" else "variance"
    grid = StateGrid.uniform(a.grid_size, a.grid_dx, meaning)
    model = "black_scholes" if a.model == "bs" else a.model
    C = build_matrix(None if a.model == "bs" else _params(a), quotes, grid, model)
    write_matrix_csv(C, a.out or sys.stdout)
    diag = condition_diagnostics(C, a.rank_tol).as_dict()
    if a.report or a.out:
        _dump(diag, a.report)


def cmd_invert(a):
    C = read_matrix_csv(a.matrix)
    target = _read_column(a.target)
    rep = tykhonov_invert(C, target, _reg(a), solver=a.solver)
    if a.density:
        rep.density.to_csv(a.density)
    print(rep.to_json())


def cmd_select_alpha(a):
    C = read_matrix_csv(a.matrix)
    sel = select_alpha(C, _read_column(a.target), a.precision, a.alpha_grid)
    _dump({"alpha": sel.alpha, "qualified": sel.qualified,
           "table": [{"alpha": x, "residual_linf": _g(r)} for x, r in sel.table]})


def cmd_filter(a):
    spots = _read_column(a.spots)
    pf = HestonParticleFilter(_params(a), n_particles=a.particles, dt=a.dt, seed=a.seed)
    pf.fit(spots)
    pf.trajectory_csv(a.out or sys.stdout)


def cmd_calibrate(a):
    qs, rates = chain_quote_set(_day_rows(a.chain, a.date), a.min_business_days, a.fallback_rate)
    weights = moneyness_weights(qs)
    res = calibrate(qs, weights, a.model, n_restarts=a.restarts, seed=a.seed, min_business_days=0)
    out = res.as_dict()
    out["rates"] = {f"{t:.12g}": {"rate": _g(r), "source": s} for t, (r, _, s) in rates.items()}
    _dump(out, a.out)


def cmd_varswap(a):
    rate = varswap_rate(_params(a), a.x0, a.tau_star, jumps=not a.no_jumps)
    _dump({"swap_rate": _g(rate), "vol_points": _g(100 * math.sqrt(rate))})


def cmd_vix(a):
    qs, rates = chain_quote_set(_day_rows(a.chain, a.date), a.min_business_days, a.fallback_rate)
    taus = sorted(rates)
    tau = min(taus, key=lambda t: abs(t - a.tau_star)) if a.maturity is None else a.maturity
    if tau not in rates:
        raise ImpliedFilterError(f"no maturity {tau}; available: {', '.join(f'{t:.6g}' for t in taus)}")
    chain = qs.subset(qs.taus == tau)
    vix, info = vix_from_chain(chain, qs.mkt.spot * math.exp(rates[tau][0] * tau), full_output=True)
    _dump({"vix": _g(vix), "tau": _g(tau), "rate": _g(rates[tau][0]), **info})


def cmd_experiment(a):
    cfg = load_config(a.config, [f"experiment={a.name}", *(a.set or [])])
    bundle = run_experiment(cfg)
    if a.out:
        bundle.write(a.out)
    _dump(bundle.summary)


def cmd_pipeline(a):
    cfg = load_config(a.config, ["experiment=pipeline", *(a.set or [])])
    files = list(a.chains)
    if a.synthetic:
        rows, _ = generate_synthetic_chains(dt.date.fromisoformat(a.start), a.synthetic,
                                            ModelParams.from_values(2.0, 0.0225, 0.3, -0.6),
                                            decimals=a.synthetic_decimals, seed=cfg.seed)
        path = a.synthetic_out or "synthetic_chain.csv"
        write_chain_csv(rows, path)
        files.append(path)
    if not files:
        raise ImpliedFilterError("give chain files or --synthetic N")
    bundle = run_daily_pipeline(files, cfg, a.out)
    _dump(bundle.summary)


def build_parser():
    parser = argparse.ArgumentParser(prog="implied-filter", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="option prices under Black-Scholes or Heston")
    p.add_argument("--model", choices=("bs", "heston"), default="heston")
    p.add_argument("--strikes", default="90:110:5", help="list a,b,c or start:stop:step")
    p.add_argument("--kind", default="call")
    p.add_argument("--sigma", type=float, default=0.15, help="Black-Scholes volatility")
    _add_market_args(p)
    _add_model_args(p)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("build-matrix", help="model-price matrix over a state grid")
    p.add_argument("--model", choices=("bs", "heston", "heston_jumps"), default="heston")
    p.add_argument("--strikes", default="80:120:1")
    p.add_argument("--grid-size", type=int, default=41)
    p.add_argument("--grid-dx", type=float, default=0.0026)
    p.add_argument("--rank-tol", type=float, default=None,
                   help="singular-value cutoff for the rank; default max(M,H) eps s_max")
    p.add_argument("--out", help="matrix CSV (default stdout)")
    p.add_argument("--report", help="condition diagnostics JSON")
    _add_market_args(p)
    _add_model_args(p, with_state=False)
    p.set_defaults(func=cmd_build_matrix)

    p = sub.add_parser("invert", help="regularized simplex inversion of prices")
    p.add_argument("--matrix", required=True)
    p.add_argument("--target", required=True, help="CSV whose last column holds prices")
    p.add_argument("--density", help="write the density CSV here")
    p.add_argument("--solver", choices=("active_set", "projected_gradient"), default="active_set")
    _add_reg_args(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("select-alpha", help="largest alpha fitting within a price precision")
    p.add_argument("--matrix", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--precision", type=float, default=0.005)
    p.add_argument("--alpha-grid", type=_floats, default=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5))
    p.set_defaults(func=cmd_select_alpha)

    p = sub.add_parser("filter", help="particle filter on a spot series")
    p.add_argument("--spots", required=True, help="CSV whose last column holds spots")
    p.add_argument("--particles", type=int, default=5000)
    p.add_argument("--dt", type=float, default=1 / 252)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_model_args(p, with_state=False)
    p.set_defaults(func=cmd_filter)

    for name, func, help_ in (("calibrate", cmd_calibrate, "calibrate one day of a chain"),
                              ("vix", cmd_vix, "model-free volatility index from a chain")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--chain", required=True)
        p.add_argument("--date", help="ISO quote date (default: first in file)")
        p.add_argument("--min-business-days", type=int, default=7)
        p.add_argument("--fallback-rate", type=float, default=0.0)
        p.set_defaults(func=func)
        if name == "calibrate":
            p.add_argument("--model", choices=("heston", "heston_jumps"), default="heston")
            p.add_argument("--restarts", type=int, default=8)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out")
        else:
            p.add_argument("--maturity", type=float, help="years; default nearest to --tau-star")
            p.add_argument("--tau-star", type=float, default=30 / 365)

    p = sub.add_parser("varswap", help="model variance-swap rate")
    p.add_argument("--tau-star", type=float, default=30 / 365)
    p.add_argument("--no-jumps", action="store_true")
    _add_model_args(p)
    p.set_defaults(func=cmd_varswap)

    p = sub.add_parser("experiment", help="synthetic replication experiments")
    p.add_argument("name", choices=("bs", "heston", "precision", "perturb", "conditioning"))
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="directory for CSV tables and summary.json")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("pipeline", help="daily calibration and inversion over chain files")
    p.add_argument("chains", nargs="*")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="output directory")
    p.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="also generate and process N synthetic business days")
    p.add_argument("--start", default="2005-01-03")
    p.add_argument("--synthetic-out")
    p.add_argument("--synthetic-decimals", type=int, default=2,
                   help="quote rounding of the synthetic chains")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ImpliedFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
