"""Particle approximation of the physical-measure filter on the variance state.

Each particle carries a variance level. Between two spot observations the
variance is simulated on ``substeps`` sub-intervals with full-truncation Euler,
and the particle is weighted by the conditional density of the observed log
return given the simulated path. Conditioning on the variance path leaves a
Gaussian log return whose mean picks up the correlated part of the variance
noise through

    xi = (x_end - x_start - kappa * (xbar * dt - int x du)) / gamma.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from ._validation import as_1d, check_positive, check_probability_vector
from .exceptions import DegeneratePathError, FilterDegeneracyError, InvalidInputError
from .inversion import Density
from .matrix import StateGrid
from .params import HestonParams, ModelParams

__all__ = [
    "CIRPathSegment",
    "HestonParticleFilter",
    "ParticleCloud",
    "UncertaintyPremium",
    "path_likelihood",
    "pf_step",
    "posterior_density",
    "propagate_cir",
    "simulate_heston_path",
    "uncertainty_premium",
    "write_trajectory_csv",
]

DEFAULT_SUBSTEPS = 8
DEFAULT_RESAMPLE_THRESHOLD = 0.5
DEFAULT_PREMIUM_FLOOR = 1e-6


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted variance particles."""

    states: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = as_1d(self.states, "states")
        if np.any(x < 0):
            raise InvalidInputError("particle states must be nonnegative")
        w = check_probability_vector(self.weights, "weights")
        if w.size != x.size:
            raise InvalidInputError("states and weights differ in length")
        x, w = x.copy(), w.copy()
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def equally_weighted(cls, states):
        x = as_1d(states, "states")
        return cls(x, np.full(x.size, 1.0 / x.size))

    @classmethod
    def from_weights(cls, states, raw_weights):
        w = as_1d(raw_weights, "weights")
        return cls(states, w / w.sum())

    @classmethod
    def stationary(cls, heston: HestonParams, n, seed=None):
        """Draw ``n`` particles from the gamma stationary law of the CIR process."""
        if heston.gamma_vol == 0:
            return cls.equally_weighted(np.full(n, heston.xbar))
        shape = 2.0 * heston.kappa * heston.xbar / heston.gamma_vol**2
        scale = heston.gamma_vol**2 / (2.0 * heston.kappa)
        rng = np.random.default_rng(seed)
        return cls.equally_weighted(rng.gamma(shape, scale, n))

    def __len__(self):
        return self.states.size

    @property
    def ess(self):
        return float(1.0 / np.sum(self.weights**2))

    @property
    def mean(self):
        return float(self.weights @ self.states)

    @property
    def std(self):
        m = self.mean
        return float(math.sqrt(max(self.weights @ (self.states - m) ** 2, 0.0)))


@dataclass(frozen=True)
class CIRPathSegment:
    """Variance values on an equally spaced sub-grid of one observation interval."""

    values: np.ndarray
    dt: float
    integral_x: float
    xi: float

    @classmethod
    def from_values(cls, values, dt, heston: HestonParams):
        v = as_1d(values, "values")
        if v.size < 2:
            raise InvalidInputError("a path segment needs at least two values")
        if np.any(v < 0):
            raise InvalidInputError("variance values must be nonnegative")
        dt = check_positive(dt, "dt")
        integ, xi = _integral_and_xi(v[None, :], dt, heston)
        v = v.copy()
        v.setflags(write=False)
        return cls(v, dt, float(integ[0]), float(xi[0]))


def _integral_and_xi(values, dt, heston: HestonParams):
    """Trapezoid integral and correlated noise of each row of ``values``."""
    h = dt / (values.shape[1] - 1)
    integ = h * (values.sum(axis=1) - 0.5 * (values[:, 0] + values[:, -1]))
    if heston.gamma_vol == 0:
        return integ, np.zeros_like(integ)
    dx = values[:, -1] - values[:, 0]
    xi = (dx - heston.kappa * (heston.xbar * dt - integ)) / heston.gamma_vol
    return integ, xi


def _simulate_cir(heston: HestonParams, x0, dt, substeps, rng):
    """Full-truncation Euler paths, shape ``(N, substeps + 1)``, floored at zero."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    h = dt / substeps
    sq_h = math.sqrt(h)
    out = np.empty((n, substeps + 1))
    out[:, 0] = x0
    x = x0.copy()
    for k in range(substeps):
        xp = np.maximum(x, 0.0)
        x = x + heston.kappa * (heston.xbar - xp) * h \
            + heston.gamma_vol * np.sqrt(xp) * sq_h * rng.standard_normal(n)
        out[:, k + 1] = np.maximum(x, 0.0)
    return out


def propagate_cir(params: ModelParams, cloud: ParticleCloud, dt, substeps=DEFAULT_SUBSTEPS,
                  seed=None):
    """Simulate one observation interval for every particle under physical dynamics.

    Returns
    -------
    list of CIRPathSegment
    """
    dt = check_positive(dt, "dt")
    if int(substeps) < 1:
        raise InvalidInputError("substeps must be >= 1")
    heston = params.physical()
    rng = np.random.default_rng(seed)
    paths = _simulate_cir(heston, cloud.states, dt, int(substeps), rng)
    integ, xi = _integral_and_xi(paths, dt, heston)
    segs = []
    for i in range(paths.shape[0]):
        row = paths[i].copy()
        row.setflags(write=False)
        segs.append(CIRPathSegment(row, dt, float(integ[i]), float(xi[i])))
    return segs


def _log_likelihood(params: ModelParams, integ, xi, log_return, dt):
    rho = params.heston.rho if params.heston.gamma_vol > 0 else 0.0
    mean = params.mu_phys * dt - 0.5 * integ + rho * xi
    var = (1.0 - rho**2) * integ
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = -0.5 * (log_return - mean) ** 2 / var - 0.5 * np.log(2.0 * np.pi * var)
    return np.where(var > 0, ll, -np.inf)


def path_likelihood(params: ModelParams, seg: CIRPathSegment, s_prev, s_now, dt):
    """Density of ``log(s_now / s_prev)`` given the simulated variance path.

    Raises
    ------
    DegeneratePathError
        If the path has zero integrated variance.
    """
    s_prev = check_positive(s_prev, "s_prev")
    s_now = check_positive(s_now, "s_now")
    dt = check_positive(dt, "dt")
    if not seg.integral_x > 0:
        raise DegeneratePathError("integrated variance along the path is zero")
    ll = _log_likelihood(params, np.array([seg.integral_x]), np.array([seg.xi]),
                         math.log(s_now / s_prev), dt)
    return float(np.exp(ll[0]))


def _systematic_resample(weights, rng):
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="left")


def pf_step(params: ModelParams, cloud: ParticleCloud, s_prev, s_now, dt,
            substeps=DEFAULT_SUBSTEPS, resample_threshold=DEFAULT_RESAMPLE_THRESHOLD,
            seed=None):
    """Propagate, reweight by the path likelihood and resample when the ESS drops.

    ``seed`` may be an integer or a ``numpy.random.Generator``.

    Raises
    ------
    FilterDegeneracyError
        If every particle has zero likelihood.
    """
    dt = check_positive(dt, "dt")
    if int(substeps) < 1:
        raise InvalidInputError("substeps must be >= 1")
    if not 0.0 <= resample_threshold <= 1.0:
        raise InvalidInputError("resample_threshold must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    heston = params.physical()
    paths = _simulate_cir(heston, cloud.states, dt, int(substeps), rng)
    integ, xi = _integral_and_xi(paths, dt, heston)
    ll = _log_likelihood(params, integ, xi,
                         math.log(check_positive(s_now, "s_now") / check_positive(s_prev, "s_prev")),
                         dt)
    with np.errstate(divide="ignore"):
        logw = np.log(cloud.weights) + ll
    top = np.max(logw)
    if not np.isfinite(top):
        raise FilterDegeneracyError("all particles have zero likelihood")
    w = np.exp(logw - top)
    w /= w.sum()
    states = paths[:, -1]
    if 1.0 / np.sum(w**2) < resample_threshold * w.size:
        idx = _systematic_resample(w, rng)
        states = states[idx]
        w = np.full(w.size, 1.0 / w.size)
    return ParticleCloud(states, w)


def posterior_density(cloud: ParticleCloud, grid: StateGrid, bandwidth) -> Density:
    """Gaussian-kernel projection of the particles onto the grid nodes."""
    bandwidth = check_positive(bandwidth, "bandwidth")
    z = (grid.points[:, None] - cloud.states[None, :]) / bandwidth
    raw = np.exp(-0.5 * z**2) @ cloud.weights
    if not raw.sum() > 0:
        # every particle is many bandwidths away from the grid; fall back to nearest nodes
        idx = np.abs(grid.points[:, None] - cloud.states[None, :]).argmin(axis=0)
        raw = np.bincount(idx, weights=cloud.weights, minlength=grid.size)
    return Density.normalized(raw, grid)


@dataclass(frozen=True)
class UncertaintyPremium:
    """Nodewise ratio of implied to statistical density; NaN where masked."""

    ratio: np.ndarray
    mask: np.ndarray
    grid: StateGrid

    def integral(self, statistical: Density):
        keep = ~self.mask
        return float(np.sum(self.ratio[keep] * statistical.weights[keep]))


def uncertainty_premium(implied: Density, statistical: Density,
                        floor=DEFAULT_PREMIUM_FLOOR) -> UncertaintyPremium:
    floor = check_positive(floor, "floor")
    if implied.grid != statistical.grid:
        raise InvalidInputError("densities must share a grid")
    mask = statistical.weights < floor
    ratio = np.full(implied.grid.size, np.nan)
    ratio[~mask] = implied.weights[~mask] / statistical.weights[~mask]
    ratio.setflags(write=False)
    mask.setflags(write=False)
    return UncertaintyPremium(ratio, mask, implied.grid)


def simulate_heston_path(params: ModelParams, x0, s0, n_steps, dt, substeps=20, seed=None):
    """Physical-measure Heston path sampled every ``dt``.

    Returns
    -------
    spots, variances : ndarray, shape (n_steps + 1,)
    """
    heston = params.physical()
    rng = np.random.default_rng(seed)
    h = dt / substeps
    sq_h = math.sqrt(h)
    rho_c = math.sqrt(1.0 - heston.rho**2)
    x = float(x0)
    log_s = math.log(s0)
    spots = [s0]
    xs = [x]
    for _ in range(n_steps):
        for _ in range(substeps):
            xp = max(x, 0.0)
            z1, z2 = rng.standard_normal(2)
            log_s += (params.mu_phys - 0.5 * xp) * h + math.sqrt(xp) * sq_h * (heston.rho * z1 + rho_c * z2)
            x += heston.kappa * (heston.xbar - xp) * h + heston.gamma_vol * math.sqrt(xp) * sq_h * z1
        spots.append(math.exp(log_s))
        xs.append(max(x, 0.0))
    return np.array(spots), np.array(xs)


def write_trajectory_csv(times, means, stds, ess, path_or_buf=None):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time", "posterior_mean", "posterior_std", "ess"])
    for row in zip(times, means, stds, ess):
        writer.writerow([f"{v:.12g}" for v in row])
    text = buf.getvalue()
    if path_or_buf is None:
        return text
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)
    return None


class HestonParticleFilter(BaseEstimator):
    """Sequential filter of the variance state from a spot price series.

    Parameters
    ----------
    params : ModelParams
        Risk-neutral Heston parameters, physical drift and volatility risk premium.
    n_particles : int
    dt : float
        Time between consecutive observations in years.
    substeps : int
    resample_threshold : float
        Resample when the ESS falls below this fraction of ``n_particles``.
    seed : int
    initial : array_like, optional
        Initial particle states; defaults to draws from the stationary law.

    Attributes
    ----------
    cloud_ : ParticleCloud
        Posterior after the last observation.
    trajectory_ : ndarray, shape (n_obs, 4)
        Columns time, posterior mean, posterior std and ESS.
    weight_sum_error_ : float
        Largest ``|sum(weights) - 1|`` over all steps.
    """

    def __init__(self, params=None, n_particles=5000, dt=1.0 / 252, substeps=DEFAULT_SUBSTEPS,
                 resample_threshold=DEFAULT_RESAMPLE_THRESHOLD, seed=0, initial=None):
        self.params = params
        self.n_particles = n_particles
        self.dt = dt
        self.substeps = substeps
        self.resample_threshold = resample_threshold
        self.seed = seed
        self.initial = initial

    def _run(self, spots):
        if self.params is None:
            raise InvalidInputError("params must be set before fitting")
        s = as_1d(spots, "spots")
        if s.size < 2 or np.any(s <= 0):
            raise InvalidInputError("need at least two positive spot prices")
        ss = np.random.SeedSequence(self.seed)
        init_seed, run_seed = ss.spawn(2)
        if self.initial is None:
            cloud = ParticleCloud.stationary(self.params.physical(), int(self.n_particles),
                                             np.random.default_rng(init_seed))
        else:
            cloud = ParticleCloud.equally_weighted(self.initial)
        rng = np.random.default_rng(run_seed)
        rows = [(0.0, cloud.mean, cloud.std, cloud.ess)]
        sum_err = abs(cloud.weights.sum() - 1.0)
        for n in range(1, s.size):
            cloud = pf_step(self.params, cloud, s[n - 1], s[n], self.dt, self.substeps,
                            self.resample_threshold, rng)
            rows.append((n * self.dt, cloud.mean, cloud.std, cloud.ess))
            sum_err = max(sum_err, abs(cloud.weights.sum() - 1.0))
        return cloud, np.array(rows), float(sum_err)

    def fit(self, X, y=None):
        """Filter the spot series ``X`` (one-dimensional)."""
        self.cloud_, self.trajectory_, self.weight_sum_error_ = self._run(X)
        return self

    def predict(self, X):
        """Posterior means of the variance after each observation of ``X``."""
        return self._run(X)[1][:, 1]

    def posterior(self, grid: StateGrid, bandwidth=None) -> Density:
        if not hasattr(self, "cloud_"):
            raise InvalidInputError("filter has not been fitted")
        if bandwidth is None:
            # Silverman's rule on the weighted cloud
            bandwidth = max(1.06 * self.cloud_.std * len(self.cloud_) ** -0.2, grid.dx / 2)
        return posterior_density(self.cloud_, grid, bandwidth)

    def trajectory_csv(self, path_or_buf=None):
        t = self.trajectory_
        return write_trajectory_csv(t[:, 0], t[:, 1], t[:, 2], t[:, 3], path_or_buf)


def gamma_density(grid: StateGrid, mean, std) -> Density:
    """Gamma law with the given mean and standard deviation discretized on ``grid``."""
    shape = (mean / std) ** 2
    return Density.from_pdf(stats.gamma(shape, scale=std**2 / mean).pdf, grid)
