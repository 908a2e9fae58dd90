import json
import math

import numpy as np
import pytest

from bsdelab.engine import TimeGrid, refine, simulate_brownian
from bsdelab.errors import DimensionMismatch, DomainError, RegressionRankError
from bsdelab.generators import constant, cubic_decay, exp_square, identity_WT, bounded_sin, linear, zero
from bsdelab.measure import one_step_residuals
from bsdelab.psi import PsiParams
from bsdelab.solver import (BsdeProblem, NodeRegression, RegressionBasis, apriori_rhs, closed_form_field,
                            closed_form_for, closed_form_linear, solve, solve_backward_euler_lsmc, solve_picard,
                            sup_bound)


@pytest.fixture(scope="module")
def ens50():
    return simulate_brownian(TimeGrid.uniform(1.0, 50), 1, 100_000, seed=21)


@pytest.fixture(scope="module")
def ens20():
    return simulate_brownian(TimeGrid.uniform(1.0, 20), 1, 20_000, seed=5)


# ------------------------------------------------------------ closed form


def test_closed_form_examples():
    assert closed_form_linear(0, 0, 0, lambda x: x, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert closed_form_linear(0, 0.5, 0, lambda x: x, 1.0) == pytest.approx(0.5, abs=1e-12)
    assert closed_form_linear(1, 0, 1, lambda x: 0 * x, 1.0) == pytest.approx(math.e - 1, rel=1e-12)
    # a -> 0 limit
    assert closed_form_linear(1e-9, 0, 2.0, lambda x: 0 * x, 1.5) == pytest.approx(3.0, rel=1e-8)


def test_closed_form_against_gaussian_identity():
    # E[sin(m + s G)] = sin(m) exp(-s^2 / 2)
    a, b, T, w, t = -1.0, 0.5, 1.0, 0.3, 0.25
    rem = T - t
    want = math.exp(a * rem) * math.sin(w + b * rem) * math.exp(-rem / 2)
    assert closed_form_linear(a, b, 0.0, np.sin, T, t, w) == pytest.approx(want, abs=1e-12)
    # non-smooth payoff falls back to adaptive quadrature: E|G| = sqrt(2/pi)
    assert closed_form_linear(0, 0, 0, np.abs, 1.0) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-7)


def test_closed_form_for_rejects_nonaffine():
    p = BsdeProblem(TimeGrid.uniform(1.0, 4), cubic_decay(0.5), bounded_sin())
    with pytest.raises(DomainError):
        closed_form_for(p)


# ------------------------------------------------------------ regression layer


def test_node_regression_matches_lstsq():
    rng = np.random.default_rng(0)
    F = np.vstack([np.ones(500), rng.normal(size=(3, 500))])
    y = rng.normal(size=500) + F[1]
    beta = NodeRegression(F, 0.0).coefficients(y)[:, 0]
    ref = np.linalg.lstsq(F.T, y, rcond=None)[0]
    assert np.allclose(beta, ref, atol=1e-10)
    # ridge: (F F^T + lam n I') beta = F y with an unpenalized intercept
    lam = 0.1
    P = np.diag([0.0, 1.0, 1.0, 1.0]) * lam * 500
    ref = np.linalg.solve(F @ F.T + P, F @ y)
    assert np.allclose(NodeRegression(F, lam).coefficients(y)[:, 0], ref, atol=1e-10)


def test_rank_failure():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 4), 1, 200, 0)
    dup = RegressionBasis(2, ridge=0.0, extra_features=lambda e, i: e.levels()[:, i, :] / math.sqrt(max(e.grid.nodes[i], 1e-9)))
    with pytest.raises(RegressionRankError):
        NodeRegression(dup.features(ens, 2), 0.0)


def test_features_are_orthonormal_hermite():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 2), 1, 200_000, 1)
    F = RegressionBasis(4, clip=None).features(ens, 2)
    n = F.shape[1]
    prods = F[:, None, :] * F[None, :, :]
    gram = prods.mean(axis=2)
    se = prods.std(axis=2) / math.sqrt(n)
    assert np.all(np.abs(gram - np.eye(5)) <= 5 * se + 1e-12)
    assert F.shape == (5, n)
    # at t = 0 only the intercept carries information
    assert RegressionBasis(4).features(ens, 0).shape == (1, n)


def test_basis_validation():
    with pytest.raises(DomainError):
        RegressionBasis(-1)
    with pytest.raises(DomainError):
        RegressionBasis(3, ridge=-1.0)
    assert "deg=7" in RegressionBasis(7).describe()


# ------------------------------------------------------------ backward Euler


def test_martingale_representation_oracle(ens50):
    # f = 0, xi = W_T: Y_t = W_t, Z = 1
    p = BsdeProblem(ens50.grid, zero(), identity_WT())
    sol = solve_backward_euler_lsmc(p, ens50, RegressionBasis(3))
    assert abs(sol.y0) < 0.02
    assert float(np.mean(np.abs(sol.Z - 1.0))) < 0.05
    assert np.array_equal(sol.Y[:, -1], p.xi(ens50))


def test_constant_terminal_is_exact(ens20):
    p = BsdeProblem(ens20.grid, zero(), constant(2.5))
    for sol in (solve_backward_euler_lsmc(p, ens20, RegressionBasis(3)), solve_picard(p, ens20, RegressionBasis(3))):
        assert np.allclose(sol.Y, 2.5, atol=1e-12) and np.allclose(sol.Z, 0.0, atol=1e-12)


def test_scalar_ode_oracle():
    # y' = -(a y + c), y(T) = 0; the implicit step is exact for the discrete
    # recursion Y_i = (Y_{i+1} + c dt) / (1 - a dt)
    a, c = 1.0, 1.0
    exact = (c / a) * math.expm1(a)
    for M in (20, 200):
        ens = simulate_brownian(TimeGrid.uniform(1.0, M), 1, 2000, seed=5)
        p = BsdeProblem(ens.grid, linear(a, 0.0, c), constant(0.0))
        be = solve_backward_euler_lsmc(p, ens, RegressionBasis(3))
        discrete = (c / a) * ((1 - a / M) ** (-M) - 1)
        assert be.y0 == pytest.approx(discrete, rel=1e-9)
        tol = 1e-6
        pc = solve_picard(p, ens, RegressionBasis(3), tol=tol)
        assert pc.meta["converged"] and abs(pc.y0 - be.y0) <= 2 * tol
    assert abs(be.y0 - exact) <= 0.01 * exact


def test_affine_with_z_against_closed_form(ens50):
    p = BsdeProblem(ens50.grid, linear(-1.0, 0.5, 0.0), bounded_sin())
    sol = solve_backward_euler_lsmc(p, ens50, RegressionBasis(7))
    exact = closed_form_for(p)
    assert abs(sol.y0 - exact) <= max(0.01 * abs(exact), 3 * sol.y0_stderr + 0.02)
    # Z_t = e^{a rem} cos(W_t + b rem) e^{-rem/2} at a mid node
    i = 25
    rem = 1.0 - ens50.grid.nodes[i]
    zex = math.exp(-rem) * np.cos(ens50.levels()[:, i, 0] + 0.5 * rem) * math.exp(-rem / 2)
    assert float(np.mean(np.abs(sol.Z[:, i, 0] - zex))) < 0.02
    field = closed_form_field(p, ens50.subset(5000))
    assert float(np.max(np.mean(np.abs(sol.Y[:5000] - field), axis=0))) < 0.02


def test_projected_one_step_residual_is_small(ens20):
    p = BsdeProblem(ens20.grid, cubic_decay(0.5), bounded_sin())
    basis = RegressionBasis(5)
    sol = solve_backward_euler_lsmc(p, ens20, basis)
    res = one_step_residuals(ens20, sol, p.f)
    for i in (0, 5, 10, 19):
        proj = NodeRegression(basis.features(ens20, i), basis.ridge).project(res[:, i])
        # tolerance: a small fraction of the per-step noise sd(Z dW) ~ 0.2
        assert float(np.mean(np.abs(proj))) < 5e-3


def test_solver_is_deterministic(ens20):
    p = BsdeProblem(ens20.grid, cubic_decay(0.5), bounded_sin())
    a = solve(p, ens20, RegressionBasis(5))
    b = solve(p, ens20, RegressionBasis(5))
    assert a.digest() == b.digest()
    json.loads(a.meta_json())


def test_problem_checks(ens20):
    p = BsdeProblem(TimeGrid.uniform(1.0, 10), zero(), constant(0.0))
    with pytest.raises(DimensionMismatch):
        solve(p, ens20)
    with pytest.raises(KeyError):
        solve(BsdeProblem(ens20.grid, zero(), constant(0.0)), ens20, scheme="rk4")


def test_sup_bound_and_truncation():
    g = TimeGrid.uniform(1.0, 5)
    assert sup_bound(BsdeProblem(g, cubic_decay(0.5), bounded_sin())) == pytest.approx(math.e)
    assert sup_bound(BsdeProblem(g, cubic_decay(0.5), identity_WT())) is None
    ens = simulate_brownian(g, 1, 5000, 3)
    sol = solve(BsdeProblem(g, cubic_decay(0.5), bounded_sin()), ens, RegressionBasis(5))
    assert sol.meta["y_bound"] == pytest.approx(math.e) and np.max(np.abs(sol.Y)) <= 1.0 + 1e-12


# ------------------------------------------------------------ Picard


def test_picard_zero_generator_one_iteration(ens20):
    p = BsdeProblem(ens20.grid, zero(), identity_WT())
    plain = solve_picard(p, ens20, RegressionBasis(3), control_variate=False)
    assert plain.meta["iterations"] == 1 and plain.meta["converged"]
    # the first iterate is the conditional-expectation field itself
    reg = NodeRegression(RegressionBasis(3).features(ens20, 7), 1e-8)
    assert np.allclose(plain.Y[:, 7], reg.project(p.xi(ens20)), atol=1e-12)
    # against the exact field Y_t = W_t the control variate removes most of the regression noise
    W = ens20.levels()[:, :, 0]
    cv = solve_picard(p, ens20, RegressionBasis(3))
    err_plain = float(np.max(np.mean(np.abs(plain.Y - W), axis=0)))
    err_cv = float(np.max(np.mean(np.abs(cv.Y - W), axis=0)))
    assert cv.meta["converged"] and err_plain < 0.03 and err_cv < err_plain / 5


def test_picard_nonconvergence_is_flagged(ens20):
    p = BsdeProblem(ens20.grid, cubic_decay(0.5), bounded_sin())
    sol = solve_picard(p, ens20, RegressionBasis(3), k_max=2, tol=1e-14)
    assert sol.meta["converged"] is False and np.all(np.isfinite(sol.Y))


def test_schemes_agree_on_osgood_case():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 20), 1, 30_000, 9)
    p = BsdeProblem(ens.grid, cubic_decay(0.5), bounded_sin())
    be = solve(p, ens, RegressionBasis(7))
    pc = solve(p, ens, RegressionBasis(7), scheme="picard")
    assert float(np.max(np.mean(np.abs(be.Y - pc.Y), axis=0))) < 0.01


# ------------------------------------------------------------ a-priori bound


def test_apriori_rhs_dominates_and_needs_supercritical(ens20):
    p = BsdeProblem(ens20.grid, linear(0.0, 0.5, 0.0), bounded_sin())
    sol = solve(p, ens20, RegressionBasis(5))
    rhs, tol, cond = apriori_rhs(p, ens20, RegressionBasis(5), PsiParams(1.0, 0.5, 1.0))
    assert rhs.shape == sol.Y.shape and np.all(np.abs(sol.Y) <= rhs + tol[None, :])
    with pytest.raises(DomainError):
        apriori_rhs(BsdeProblem(ens20.grid, cubic_decay(0.5), bounded_sin()), ens20, RegressionBasis(3),
                    PsiParams(1.0, 0.5, 1.0))


def test_csv_export(tmp_path):
    ens = simulate_brownian(TimeGrid.uniform(1.0, 3), 1, 4, 0)
    sol = solve(BsdeProblem(ens.grid, zero(), identity_WT()), ens, RegressionBasis(1))
    sol.to_csv(tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "path,node,Y,Z0" and len(rows) == 1 + 4 * 4
