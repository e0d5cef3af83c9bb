import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize, stats
from sklearn.base import clone

from implied_filter.exceptions import InvalidInputError, NumericFailureError
from implied_filter.inversion import (
    REGULARIZATION_PRESETS,
    Density,
    ImpliedDensityRegressor,
    RegularizationConfig,
    density_moments,
    difference_operator,
    kkt_violation,
    project_simplex,
    select_alpha,
    simplex_least_squares,
    simplex_projected_gradient,
    svd_reformulate,
    tykhonov_invert,
)
from implied_filter.matrix import QuoteSet, StateGrid, build_matrix
from implied_filter.params import MarketState, ModelParams

TAU = 10 / 252
MKT = MarketState(100.0, math.log(1.009662) / TAU)


@pytest.fixture(scope="module")
def heston_problem():
    grid = StateGrid.uniform(41, 0.0026)
    q = QuoteSet.from_prices(MKT, 79.0 + np.arange(1, 42), TAU, np.zeros(41))
    C = build_matrix(ModelParams.from_values(2.0, 0.0225, 0.3, -0.6), q, grid)
    truth = Density.from_pdf(stats.gamma(4.0, scale=0.005).pdf, grid)
    return C, truth


def test_recovers_mean_of_gamma_mixture(heston_problem):
    C, truth = heston_problem
    rep = tykhonov_invert(C, C.entries @ truth.weights, RegularizationConfig(1e-4))
    assert rep.residual_sq <= 1e-5
    assert abs(rep.moments.mean - 0.02) <= 5e-4
    assert rep.kkt < 1e-8


def test_svd_reformulation_gives_same_density(heston_problem):
    C, truth = heston_problem
    y = C.entries @ truth.weights
    A, b = svd_reformulate(C, 1e-4, y)
    via_svd, _ = simplex_least_squares(A, b)
    direct = tykhonov_invert(C, y, RegularizationConfig(1e-4)).density.weights
    np.testing.assert_allclose(via_svd, direct, atol=1e-8)


def test_svd_reformulation_objective_identity():
    rng = np.random.default_rng(0)
    C = rng.random((6, 9))
    y = rng.random(6)
    A, b = svd_reformulate(C, 0.3, y)
    for _ in range(5):
        phi = rng.random(9)
        lhs = np.sum((A @ phi - b) ** 2)
        rhs = np.sum((C @ phi - y) ** 2) + 0.3 * phi @ phi
        const = y @ y - b @ b
        assert lhs + const == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("cfg", [RegularizationConfig(1e-2), RegularizationConfig(1e-3, 1e-2, 1e-3)])
def test_solvers_agree(cfg):
    rng = np.random.default_rng(11)
    C = rng.random((15, 10))
    y = C @ rng.dirichlet(np.ones(10)) + 0.01 * rng.normal(size=15)
    grid = StateGrid.uniform(10, 0.1)
    a = tykhonov_invert(C, y, cfg, grid=grid)
    b = tykhonov_invert(C, y, cfg, grid=grid, solver="projected_gradient")
    assert b.objective == pytest.approx(a.objective, rel=1e-9)
    np.testing.assert_allclose(b.density.weights, a.density.weights, atol=1e-6)


def test_projected_gradient_failure_carries_best_iterate(heston_problem):
    C, truth = heston_problem
    with pytest.raises(NumericFailureError) as info:
        tykhonov_invert(C, C.entries @ truth.weights, RegularizationConfig(1e-3),
                        solver="projected_gradient", max_iter=200)
    assert info.value.achieved > 1e-10
    assert info.value.best.sum() == pytest.approx(1.0)


def test_active_set_matches_generic_qp():
    rng = np.random.default_rng(4)
    G = rng.normal(size=(12, 7))
    h = rng.normal(size=12)
    x, _ = simplex_least_squares(G, h)
    res = optimize.minimize(lambda z: np.sum((G @ z - h) ** 2), np.full(7, 1 / 7),
                            jac=lambda z: 2 * G.T @ (G @ z - h), method="SLSQP",
                            bounds=[(0, 1)] * 7,
                            constraints={"type": "eq", "fun": lambda z: z.sum() - 1},
                            options={"ftol": 1e-15, "maxiter": 500})
    np.testing.assert_allclose(x, res.x, atol=1e-6)
    assert np.sum((G @ x - h) ** 2) <= res.fun + 1e-12


def test_projected_gradient_reaches_kkt_point():
    rng = np.random.default_rng(5)
    G = rng.normal(size=(10, 6))
    h = rng.normal(size=10)
    x, _ = simplex_projected_gradient(G, h, tol=1e-11)
    assert kkt_violation(x, 2 * G.T @ (G @ x - h), active_tol=1e-12) < 1e-9


def test_zero_target_returns_uniform_density(heston_problem):
    C, _ = heston_problem
    rep = tykhonov_invert(C, np.zeros(C.shape[0]))
    np.testing.assert_allclose(rep.density.weights, 1 / 41)
    assert rep.iterations == 0


def test_penalty_value_decreases_with_alpha(heston_problem):
    C, truth = heston_problem
    y = C.entries @ truth.weights
    norms = [np.sum(tykhonov_invert(C, y, RegularizationConfig(a)).density.weights ** 2)
             for a in (1e-6, 1e-4, 1e-2, 1.0)]
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


def test_strong_regularization_flattens_density(heston_problem):
    C, truth = heston_problem
    rep = tykhonov_invert(C, C.entries @ truth.weights, RegularizationConfig(1.0))
    assert rep.moments.std > truth.moments().std


def test_row_weights_are_scale_free(heston_problem):
    C, truth = heston_problem
    y = C.entries @ truth.weights
    w = np.linspace(1, 3, 41)
    a = tykhonov_invert(C, y, RegularizationConfig(1e-4, row_weights=w))
    b = tykhonov_invert(C, y, RegularizationConfig(1e-4, row_weights=7 * w))
    np.testing.assert_allclose(a.density.weights, b.density.weights, atol=1e-12)


def test_presets():
    assert REGULARIZATION_PRESETS[0] == (1e-3, 0.0, 0.0)
    cfg = RegularizationConfig.preset(2)
    assert (cfg.alpha0, cfg.alpha1, cfg.alpha2) == (1e-3, 1e-7, 1e-11)
    with pytest.raises(InvalidInputError):
        RegularizationConfig.preset(3)
    with pytest.raises(InvalidInputError):
        RegularizationConfig(-1.0)


def test_select_alpha_rounded_and_exact(heston_problem):
    C, truth = heston_problem
    exact = C.entries @ truth.weights
    rounded = np.where(exact >= 0, np.floor(exact * 100 + 0.5), -np.floor(-exact * 100 + 0.5)) / 100
    sel = select_alpha(C, rounded, precision=0.005)
    assert sel.alpha == 1e-3 and sel.qualified
    strict = select_alpha(C, exact, precision=1e-12)
    assert strict.alpha == 1e-5 and not strict.qualified
    assert [a for a, _ in strict.table] == [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]


def test_difference_operator():
    D1 = difference_operator(1, 4, 0.5)
    np.testing.assert_array_equal(D1 @ np.array([0, 1, 2, 3.0]), [2, 2, 2])
    D2 = difference_operator(2, 5)
    np.testing.assert_array_equal(D2 @ np.arange(5.0) ** 2, [2, 2, 2])
    with pytest.raises(InvalidInputError):
        difference_operator(2, 2)


def test_density_validation_and_csv():
    grid = StateGrid.uniform(3, 0.1)
    with pytest.raises(InvalidInputError):
        Density(np.array([0.5, 0.6, -0.1]), grid)
    with pytest.raises(InvalidInputError):
        Density(np.array([0.5, 0.6, 0.1]), grid)
    d = Density(np.array([0.2, 0.3, 0.5]), grid)
    back = Density.from_csv(io.StringIO(d.to_csv()))
    np.testing.assert_allclose(back.weights, d.weights)


def test_moments_of_two_point_law():
    d = Density(np.array([0.5, 0.0, 0.5]), StateGrid(np.array([1.0, 2.0, 3.0])))
    m = density_moments(d)
    assert (m.mean, m.std, m.skew, m.kurtosis) == pytest.approx((2.0, 1.0, 0.0, 1.0))
    point = density_moments(Density.point_mass(d.grid, 1))
    assert point.std == 0.0 and not point.defined


def test_estimator_interface(heston_problem):
    C, truth = heston_problem
    y = C.entries @ truth.weights
    est = ImpliedDensityRegressor(alpha0=1e-4, dx=0.0026).fit(C.entries, y)
    assert est.coef_.sum() == pytest.approx(1.0)
    assert np.max(np.abs(est.predict(C.entries) - y)) < 0.01
    assert est.score(C.entries, y) > 0.999
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()
    with pytest.raises(InvalidInputError):
        est.predict(C.entries[:, :5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5)))
def test_projection_lands_on_simplex_and_is_nearest(v):
    p = project_simplex(v)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)
    rng = np.random.default_rng(0)
    for z in rng.dirichlet(np.ones(v.size), size=5):
        assert np.linalg.norm(v - p) <= np.linalg.norm(v - z) + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(3, 10), n=st.integers(2, 8))
def test_noiseless_targets_fit_with_tiny_alpha(seed, m, n):
    rng = np.random.default_rng(seed)
    C = rng.random((m, n))
    phi = rng.dirichlet(np.ones(n))
    rep = tykhonov_invert(C, C @ phi, RegularizationConfig(1e-12),
                          grid=StateGrid(np.arange(1.0, n + 1)))
    assert rep.residual_l2 < 1e-5
    assert np.all(rep.density.weights >= 0)
    assert rep.density.weights.sum() == pytest.approx(1.0, abs=1e-12)
