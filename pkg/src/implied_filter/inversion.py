"""Regularized inversion of option prices for a density on the state grid.

Solves

    min_{phi in simplex}  ||C phi - y||_w^2 + a0 ||phi||^2 + a1 ||D1 phi||^2 + a2 ||D2 phi||^2

where ``D1``/``D2`` are scaled first/second differences and ``||.||_w`` is an
optionally row-weighted Euclidean norm. The objective is rewritten as a single
stacked least-squares problem ``||G phi - h||^2`` and minimized over the simplex.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_1d, check_nonnegative, check_positive
from .exceptions import InvalidInputError, NumericFailureError
from .matrix import ModelMatrix, StateGrid

__all__ = [
    "AlphaSelection",
    "Density",
    "ImpliedDensityRegressor",
    "InversionReport",
    "Moments",
    "REGULARIZATION_PRESETS",
    "RegularizationConfig",
    "density_moments",
    "difference_operator",
    "kkt_violation",
    "project_simplex",
    "select_alpha",
    "simplex_least_squares",
    "svd_reformulate",
    "tykhonov_invert",
]

SIMPLEX_ATOL = 1e-12


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Density:
    """Probability weights on the nodes of a :class:`StateGrid`."""

    weights: np.ndarray
    grid: StateGrid

    def __post_init__(self):
        w = as_1d(self.weights, "weights")
        if w.size != self.grid.size:
            raise InvalidInputError(
                f"density has {w.size} weights for a grid of {self.grid.size} points"
            )
        if np.any(w < 0):
            raise InvalidInputError("density weights must be nonnegative")
        total = w.sum()
        if abs(total - 1.0) > SIMPLEX_ATOL:
            raise InvalidInputError(f"density weights must sum to 1 (sum={total!r})")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, weights, grid):
        """Clip tiny negatives and renormalize onto the simplex."""
        w = np.maximum(np.asarray(weights, dtype=float), 0.0)
        total = w.sum()
        if total <= 0:
            raise InvalidInputError("weights have no positive mass")
        return cls(w / total, grid)

    @classmethod
    def point_mass(cls, grid, index):
        w = np.zeros(grid.size)
        w[index] = 1.0
        return cls(w, grid)

    @classmethod
    def uniform(cls, grid):
        return cls(np.full(grid.size, 1.0 / grid.size), grid)

    @classmethod
    def from_pdf(cls, pdf, grid):
        """Discretize a density function by point evaluation at the grid nodes."""
        return cls.normalized(pdf(grid.points), grid)

    @property
    def mean(self):
        return float(self.weights @ self.grid.points)

    def moments(self):
        return density_moments(self)

    def to_csv(self, path_or_buf=None):
        lines = ["state,weight"]
        lines += [f"{x:.12g},{w:.12g}" for x, w in zip(self.grid.points, self.weights)]
        text = "\n".join(lines) + "\n"
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
        return None

    @classmethod
    def from_csv(cls, path_or_buf, state_meaning="variance"):
        if hasattr(path_or_buf, "read"):
            data = np.loadtxt(path_or_buf, delimiter=",", skiprows=1, ndmin=2)
        else:
            data = np.loadtxt(path_or_buf, delimiter=",", skiprows=1, ndmin=2)
        return cls.normalized(data[:, 1], StateGrid(data[:, 0], state_meaning))


@dataclass(frozen=True)
class Moments:
    mean: float
    std: float
    skew: float
    kurtosis: float

    @property
    def defined(self):
        return not (math.isnan(self.skew) or math.isnan(self.kurtosis))

    def as_dict(self):
        return {"mean": self.mean, "std": self.std, "skew": self.skew, "kurtosis": self.kurtosis}


def density_moments(d: Density) -> Moments:
    """Mean, standard deviation, skewness and (non-excess) kurtosis.

    Skewness and kurtosis are NaN when the standard deviation is below 1e-14.
    """
    x, w = d.grid.points, d.weights
    mean = float(w @ x)
    c = x - mean
    var = float(w @ c**2)
    std = math.sqrt(max(var, 0.0))
    if std < 1e-14:
        return Moments(mean, std, math.nan, math.nan)
    return Moments(mean, std, float(w @ c**3) / std**3, float(w @ c**4) / var**2)


@dataclass(frozen=True)
class RegularizationConfig:
    """Penalty weights on the level, slope and curvature of the density.

    ``row_weights`` weight the squared price residuals; they are rescaled to
    sum to the number of rows.
    """

    alpha0: float = 1e-4
    alpha1: float = 0.0
    alpha2: float = 0.0
    row_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "alpha2"):
            object.__setattr__(self, name, check_nonnegative(getattr(self, name), name))
        if self.row_weights is not None:
            rw = as_1d(self.row_weights, "row_weights")
            if np.any(rw <= 0):
                raise InvalidInputError("row weights must be positive")
            object.__setattr__(self, "row_weights", rw * (rw.size / rw.sum()))

    @classmethod
    def preset(cls, degree, row_weights=None):
        """Regularization of a given smoothness degree (0, 1 or 2)."""
        try:
            a0, a1, a2 = REGULARIZATION_PRESETS[int(degree)]
        except KeyError:
            raise InvalidInputError(f"no preset for degree {degree!r}") from None
        return cls(a0, a1, a2, row_weights)


REGULARIZATION_PRESETS = {
    0: (1e-3, 0.0, 0.0),
    1: (1e-3, 1e-7, 0.0),
    2: (1e-3, 1e-7, 1e-11),
}


@dataclass(frozen=True)
class InversionReport:
    density: Density
    residual_l2: float
    residual_linf: float
    moments: Moments
    iterations: int
    kkt: float = 0.0
    objective: float = math.nan
    config: Optional[RegularizationConfig] = None
    residuals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def residual_sq(self):
        return self.residual_l2**2

    def as_dict(self):
        cfg = self.config
        return {
            "state_meaning": self.density.grid.state_meaning,
            "grid": [float(x) for x in self.density.grid.points],
            "weights": [float(w) for w in self.density.weights],
            "residual_l2": self.residual_l2,
            "residual_linf": self.residual_linf,
            "moments": self.moments.as_dict(),
            "iterations": self.iterations,
            "kkt": self.kkt,
            "objective": self.objective,
            "alpha0": cfg.alpha0 if cfg else None,
            "alpha1": cfg.alpha1 if cfg else None,
            "alpha2": cfg.alpha2 if cfg else None,
        }

    def to_json(self, path_or_buf=None):
        text = json.dumps(_round_floats(self.as_dict()), indent=2)
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)
        return None


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.12g}") if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def difference_operator(order: int, H: int, dx: float = 1.0) -> np.ndarray:
    """Forward-difference matrix of shape ``(H - order, H)`` scaled by ``dx**order``."""
    if order not in (1, 2):
        raise InvalidInputError("order must be 1 or 2")
    if H <= order:
        raise InvalidInputError(f"need H > {order}, got H={H}")
    dx = check_positive(dx, "dx")
    D = np.diff(np.eye(H), n=order, axis=0)
    return D / dx**order


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def kkt_violation(x, grad, active_tol=0.0) -> float:
    """Norm of the projection of ``-grad`` onto the simplex tangent cone at ``x``.

    Zero exactly at a minimizer of a convex function over the simplex.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad, dtype=float)
    bound = x <= active_tol

    def direction(nu):
        d = nu - g
        return np.where(bound, np.maximum(d, 0.0), d)

    # sum(direction(nu)) is nondecreasing in nu; bracket and bisect for the root
    lo, hi = g.min() - 1.0, g.max() + 1.0
    if not bound.any():
        nu = g.mean()
    else:
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if direction(mid).sum() > 0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-15 * max(1.0, abs(mid)):
                break
        nu = 0.5 * (lo + hi)
    return float(np.linalg.norm(direction(nu)))


def _stacked_system(C, y, cfg: RegularizationConfig, dx: float):
    C = np.asarray(C, dtype=float)
    y = np.asarray(y, dtype=float)
    M, H = C.shape
    if cfg.row_weights is not None:
        if cfg.row_weights.size != M:
            raise InvalidInputError("row_weights length does not match the number of quotes")
        sw = np.sqrt(cfg.row_weights)
        C = C * sw[:, None]
        y = y * sw
    blocks, rhs = [C], [y]
    if cfg.alpha0 > 0:
        blocks.append(math.sqrt(cfg.alpha0) * np.eye(H))
        rhs.append(np.zeros(H))
    for order, a in ((1, cfg.alpha1), (2, cfg.alpha2)):
        if a > 0:
            if H <= order:
                raise InvalidInputError(f"difference penalty of order {order} needs H > {order}")
            blocks.append(math.sqrt(a) * difference_operator(order, H, dx))
            rhs.append(np.zeros(H - order))
    return np.vstack(blocks), np.concatenate(rhs)


def _nullspace_of_ones(n):
    if n == 1:
        return np.zeros((1, 0))
    q, _ = np.linalg.qr(np.ones((n, 1)), mode="complete")
    return q[:, 1:]


def simplex_least_squares(G, h, *, max_iter=None, tol=1e-13, x0=None):
    """Minimize ``||G x - h||^2`` over the probability simplex.

    Primal active-set method: each iteration solves the equality-constrained
    least-squares subproblem on the free coordinates through an orthonormal
    null-space basis of the sum constraint, then either takes a ratio-test step
    (adding a blocking bound) or releases the bound with the most negative
    multiplier. Terminates at an exact KKT point up to rounding.

    Returns
    -------
    x : ndarray
    n_iter : int
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    H = G.shape[1]
    if max_iter is None:
        max_iter = 50 * H + 100
    x = np.full(H, 1.0 / H) if x0 is None else project_simplex(x0)
    free = x > 0
    scale = max(1.0, float(np.abs(G).max()) * max(float(np.abs(h).max()), float(np.abs(G).max())))
    nullspaces = {}

    for it in range(1, max_iter + 1):
        F = np.flatnonzero(free)
        nf = F.size
        if nf not in nullspaces:
            nullspaces[nf] = _nullspace_of_ones(nf)
        N = nullspaces[nf]
        GF = G[:, F]
        zp = np.full(nf, 1.0 / nf)
        if N.shape[1]:
            w, *_ = np.linalg.lstsq(GF @ N, h - GF @ zp, rcond=None)
            z = zp + N @ w
        else:
            z = zp
        if np.all(z >= 0):
            x = np.zeros(H)
            x[F] = z
            grad = G.T @ (G @ x - h)
            nu = grad[F].mean()
            mult = grad - nu
            mult[F] = np.inf
            j = int(np.argmin(mult))
            if mult[j] >= -tol * scale:
                return x, it
            free[j] = True
            continue
        # ratio test toward z
        xF = x[F]
        p = z - xF
        neg = p < 0
        ratios = np.full(nf, np.inf)
        ratios[neg] = xF[neg] / -p[neg]
        k = int(np.argmin(ratios))
        step = min(max(ratios[k], 0.0), 1.0)
        xF = xF + step * p
        xF[k] = 0.0
        xF = np.maximum(xF, 0.0)
        x = np.zeros(H)
        x[F] = xF
        x /= x.sum()
        free = x > 0
    raise NumericFailureError(
        f"active-set solver did not converge in {max_iter} iterations",
        achieved=kkt_violation(x, 2 * G.T @ (G @ x - h)),
        best=x,
    )


def simplex_projected_gradient(G, h, *, max_iter=50_000, tol=1e-10, x0=None):
    """Accelerated projected gradient (FISTA with adaptive restart) on the simplex.

    The step is ``1 / L`` with ``L = 2 * sigma_max(G)**2``; iteration stops when
    the tangent-cone KKT violation falls below ``tol``.
    """
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    H = G.shape[1]
    Q = G.T @ G
    c = G.T @ h
    L = 2.0 * np.linalg.norm(G, 2) ** 2
    if L == 0:
        return np.full(H, 1.0 / H), 0
    x = np.full(H, 1.0 / H) if x0 is None else project_simplex(x0)
    yk = x.copy()
    t = 1.0
    kkt = math.inf
    for it in range(1, max_iter + 1):
        grad_y = 2.0 * (Q @ yk - c)
        x_new = project_simplex(yk - grad_y / L)
        if it % 10 == 0:
            kkt = kkt_violation(x_new, 2.0 * (Q @ x_new - c), active_tol=0.0)
            if kkt < tol:
                return x_new, it
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if (yk - x_new) @ (x_new - x) > 0:  # restart momentum
            t_new = 1.0
            yk = x_new.copy()
        else:
            yk = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    raise NumericFailureError(
        f"projected gradient did not reach KKT tolerance {tol:g} in {max_iter} iterations",
        achieved=kkt,
        best=x,
    )


_SOLVERS = {
    "active_set": simplex_least_squares,
    "projected_gradient": simplex_projected_gradient,
}


def _as_matrix_and_grid(C, grid=None):
    if isinstance(C, ModelMatrix):
        return np.asarray(C.entries), (grid if grid is not None else C.grid)
    A = np.asarray(C, dtype=float)
    if A.ndim != 2:
        raise InvalidInputError("model matrix must be two-dimensional")
    if grid is None:
        grid = StateGrid(np.arange(1, A.shape[1] + 1, dtype=float), "variance")
    return A, grid


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def tykhonov_invert(C, target, cfg: Optional[RegularizationConfig] = None, *,
                    grid: Optional[StateGrid] = None, solver: str = "active_set",
                    max_iter: Optional[int] = None, tol: Optional[float] = None) -> InversionReport:
    """Implied density minimizing the regularized residual over the simplex.

    Parameters
    ----------
    C : ModelMatrix or array_like, shape (M, H)
    target : array_like, shape (M,)
        Observed prices.
    cfg : RegularizationConfig
    grid : StateGrid, optional
        Needed when ``C`` is a bare array; difference penalties use its spacing.
    solver : {"active_set", "projected_gradient"}

    Notes
    -----
    An all-zero target returns the uniform density.

    Raises
    ------
    NumericFailureError
        If the solver does not converge; carries the best iterate and its KKT
        violation.
    """
    cfg = cfg or RegularizationConfig()
    A, grid = _as_matrix_and_grid(C, grid)
    y = as_1d(target, "target")
    if y.size != A.shape[0]:
        raise InvalidInputError(f"target has {y.size} entries for {A.shape[0]} matrix rows")
    G, h = _stacked_system(A, y, cfg, grid.dx)
    if not np.any(y):
        # nothing to explain: fall back to the maximum-entropy density
        return _report(A, y, np.full(A.shape[1], 1.0 / A.shape[1]), grid, cfg, G, h, 0)
    kwargs = {}
    if max_iter is not None:
        kwargs["max_iter"] = max_iter
    if tol is not None:
        kwargs["tol"] = tol
    try:
        fn = _SOLVERS[solver]
    except KeyError:
        raise InvalidInputError(f"unknown solver {solver!r}") from None
    x, n_iter = fn(G, h, **kwargs)
    return _report(A, y, x, grid, cfg, G, h, n_iter)


def _report(A, y, x, grid, cfg, G, h, n_iter):
    density = Density.normalized(x, grid)
    w = density.weights
    resid = y - A @ w
    sw = np.sqrt(cfg.row_weights) if cfg.row_weights is not None else 1.0
    wr = resid * sw
    grad = 2.0 * G.T @ (G @ w - h)
    return InversionReport(
        density=density,
        residual_l2=float(np.linalg.norm(wr)),
        residual_linf=float(np.max(np.abs(wr))) if wr.size else 0.0,
        moments=density_moments(density),
        iterations=int(n_iter),
        kkt=kkt_violation(w, grad),
        objective=float(np.sum((G @ w - h) ** 2)),
        config=cfg,
        residuals=resid,
    )


def svd_reformulate(C, alpha0: float, target=None, row_weights=None):
    """Well-posed square system equivalent to the entropy-only problem.

    With ``C = U S P^T``, returns ``A = (S^T S + a I)^{1/2} P^T`` and
    ``b = (S^T S + a I)^{-1/2} S^T U^T y`` so that
    ``||A phi - b||^2 = ||C phi - y||^2 + a ||phi||^2 + const``.
    When ``target`` is None only ``A`` is returned.
    """
    alpha0 = check_positive(alpha0, "alpha0")
    A_mat, _ = _as_matrix_and_grid(C)
    M, H = A_mat.shape
    y = None if target is None else as_1d(target, "target")
    if row_weights is not None:
        rw = as_1d(row_weights, "row_weights")
        rw = rw * (rw.size / rw.sum())
        A_mat = A_mat * np.sqrt(rw)[:, None]
        if y is not None:
            y = y * np.sqrt(rw)
    try:
        U, s, Pt = np.linalg.svd(A_mat, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"SVD failed: {exc}") from exc
    diag = np.zeros(H)
    diag[: s.size] = s**2
    root = np.sqrt(diag + alpha0)
    A = root[:, None] * Pt
    if y is None:
        return A
    proj = np.zeros(H)
    proj[: s.size] = s * (U.T @ y)[: s.size]
    return A, proj / root


@dataclass(frozen=True)
class AlphaSelection:
    alpha: float
    report: InversionReport
    qualified: bool
    table: tuple  # (alpha, residual_linf) for every alpha tried


def select_alpha(C, target, precision: float = 0.005,
                 alpha_grid: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5), *,
                 grid: Optional[StateGrid] = None, base: Optional[RegularizationConfig] = None,
                 solver: str = "active_set") -> AlphaSelection:
    """Largest entropy weight whose fit has sup-norm residual below ``precision``.

    Falls back to the smallest alpha with ``qualified=False`` when none passes.
    """
    alphas = sorted((float(a) for a in alpha_grid), reverse=True)
    if not alphas:
        raise InvalidInputError("alpha_grid is empty")
    base = base or RegularizationConfig(alpha0=alphas[0])
    table = []
    chosen = None
    last = None
    for a in alphas:
        cfg = RegularizationConfig(a, base.alpha1, base.alpha2, base.row_weights)
        rep = tykhonov_invert(C, target, cfg, grid=grid, solver=solver)
        table.append((a, rep.residual_linf))
        last = (a, rep)
        if chosen is None and rep.residual_linf < precision:
            chosen = (a, rep)
    if chosen is not None:
        return AlphaSelection(chosen[0], chosen[1], True, tuple(table))
    return AlphaSelection(last[0], last[1], False, tuple(table))


# ---------------------------------------------------------------------------
# scikit-learn estimator
# ---------------------------------------------------------------------------

class ImpliedDensityRegressor(RegressorMixin, BaseEstimator):
    """Simplex-constrained regularized linear regression of prices on model columns.

    ``X`` is the model-price matrix (rows are options, columns are hidden
    states) and ``y`` the observed prices. After fitting, ``coef_`` is the
    implied density and ``predict`` returns ``X @ coef_``.

    Parameters
    ----------
    alpha0, alpha1, alpha2 : float
        Penalties on ``||phi||^2``, ``||D phi||^2`` and ``||D^2 phi||^2``.
    dx : float, optional
        Grid spacing for the difference penalties; taken from the grid when
        ``X`` is a :class:`ModelMatrix`, otherwise defaults to 1.
    solver : {"active_set", "projected_gradient"}
    """

    def __init__(self, alpha0=1e-4, alpha1=0.0, alpha2=0.0, dx=None, solver="active_set"):
        self.alpha0 = alpha0
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.dx = dx
        self.solver = solver

    def fit(self, X, y, sample_weight=None):
        grid = X.grid if isinstance(X, ModelMatrix) else None
        A = np.asarray(X.entries) if isinstance(X, ModelMatrix) else X
        A, y = check_X_y(A, y, dtype=float, y_numeric=True)
        if grid is None:
            dx = 1.0 if self.dx is None else float(self.dx)
            grid = StateGrid(dx * np.arange(1, A.shape[1] + 1), "variance")
        elif self.dx is not None:
            grid = StateGrid(float(self.dx) * np.arange(1, A.shape[1] + 1), grid.state_meaning)
        cfg = RegularizationConfig(self.alpha0, self.alpha1, self.alpha2, sample_weight)
        report = tykhonov_invert(A, y, cfg, grid=grid, solver=self.solver)
        self.report_ = report
        self.density_ = report.density
        self.coef_ = np.array(report.density.weights)
        self.n_iter_ = report.iterations
        self.n_features_in_ = A.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        A = np.asarray(X.entries) if isinstance(X, ModelMatrix) else X
        A = check_array(A, dtype=float)
        if A.shape[1] != self.n_features_in_:
            raise InvalidInputError(
                f"X has {A.shape[1]} columns, estimator was fitted with {self.n_features_in_}"
            )
        return A @ self.coef_
