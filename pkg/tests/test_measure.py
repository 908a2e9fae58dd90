import math

import numpy as np
import pytest

from bsdelab.engine import AdaptedProcess, TimeGrid, simulate_brownian
from bsdelab.errors import BoundViolation, EffectiveSampleSizeError, InadmissibleTerminal, SubcriticalError
from bsdelab.generators import (GeneratorSpec, bounded_sin, constant, cubic_decay, exp_clipped, exp_square,
                                identity_WT, linear, rho_linear)
from bsdelab.measure import (admissibility_check, build_measure_change, constant_measure_change,
                             drift_shifted_ensemble, exp_moment_estimate, measure_solution_price, one_step_residuals,
                             q_expectation, q_transfer_check)
from bsdelab.psi import PsiParams, psi
from bsdelab.solver import BsdeProblem, RegressionBasis, SolutionEnsemble, solve


@pytest.fixture(scope="module")
def ens():
    return simulate_brownian(TimeGrid.uniform(1.0, 20), 1, 50_000, seed=13)


def _fake_solution(ens, Z):
    return SolutionEnsemble(np.zeros((ens.n_paths, ens.grid.M + 1)), Z, ens.grid)


def test_z_independent_generator_gives_unit_density(ens):
    Z = np.random.default_rng(0).normal(size=ens.increments.shape)
    mc = build_measure_change(ens, cubic_decay(0.0), _fake_solution(ens, Z))
    assert np.all(mc.kernel.values == 0) and np.all(mc.log_density == 0)


def test_linear_in_z_kernel_and_indicator(ens):
    Z = np.random.default_rng(1).normal(size=ens.increments.shape)
    Z[:7] = 0.0
    mc = build_measure_change(ens, linear(0.0, 0.5, 0.0), _fake_solution(ens, Z))
    assert np.allclose(mc.kernel.values[7:], 0.5, atol=1e-15)
    assert np.all(mc.kernel.values[:7] == 0.0) and np.all(mc.log_density[:7] == 0.0)
    assert np.all(mc.log_density[:, 0] == 0.0)
    est = q_expectation(np.ones(ens.n_paths), mc)
    assert abs(est.value - 1.0) <= 3 * est.stderr


def test_false_declaration_is_caught(ens):
    liar = GeneratorSpec(lambda t, y, z: 2.0 * z[:, 0], b=0.5, rho=rho_linear(1.0))
    Z = np.ones(ens.increments.shape)
    with pytest.raises(BoundViolation):
        build_measure_change(ens, liar, _fake_solution(ens, Z))


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_lognormal_shift_oracle(ens, theta):
    b, T = 0.5, 1.0
    mc = constant_measure_change(ens, b)
    est = q_expectation(np.exp(theta * ens.terminal()[:, 0]), mc)
    want = math.exp(theta**2 * T / 2 + theta * b * T)
    assert abs(est.value - want) <= 3 * est.stderr
    assert est.ess_fraction > 0.5


def test_zero_kernel_is_plain_mean(ens):
    mc = constant_measure_change(ens, 0.0)
    v = np.sin(ens.terminal()[:, 0])
    est = q_expectation(v, mc)
    assert est.value == pytest.approx(float(v.sum() / v.size), abs=1e-15) and est.ess == pytest.approx(ens.n_paths)


def test_ess_collapse(ens):
    with pytest.raises(EffectiveSampleSizeError):
        q_expectation(np.ones(ens.n_paths), constant_measure_change(ens, 3.0))


def test_price_requires_admissibility(ens):
    mc = constant_measure_change(ens, 0.5)
    with pytest.raises(InadmissibleTerminal):
        measure_solution_price(constant(2.0), ens, mc)
    bad = admissibility_check(exp_square(), PsiParams(1.0, 0.5, 1.0), 20_000, seed=1)
    with pytest.raises(InadmissibleTerminal):
        measure_solution_price(exp_square(), ens, mc, bad)
    est = measure_solution_price(constant(2.0), ens, mc, override=True)
    assert abs(est.value - 2.0) <= 3 * est.stderr


def test_girsanov_shift_price_matches_solver(ens):
    b = 0.5
    p = BsdeProblem(ens.grid, linear(0.0, b, 0.0), identity_WT())
    sol = solve(p, ens, RegressionBasis(3))
    mc = build_measure_change(ens, p.f, sol)
    adm = admissibility_check(p.xi, PsiParams(1.0, b, 1.0), 20_000, seed=2)
    price = measure_solution_price(p.xi, ens, mc, adm)
    assert abs(price.value - b) <= max(0.01 * b, 3 * price.stderr)
    combined = math.hypot(price.stderr, sol.y0_stderr)
    assert abs(price.value - sol.y0) <= max(0.01 * abs(sol.y0), 3 * combined)


def test_admissibility_examples():
    params = PsiParams(1.0, 0.5, 1.0)
    rep = admissibility_check(constant(1.0), params, 1000)
    want = 0.75**-0.5 + math.exp(2.0) * float(psi(1.0, 1.0))
    assert rep.admissible and rep.bound_rhs == pytest.approx(want, rel=1e-14)
    assert admissibility_check(bounded_sin(3.0), params, 10_000).admissible
    assert admissibility_check(exp_clipped(2.0), params, 10_000).admissible
    heavy = admissibility_check(exp_square(), params, 50_000, seed=4)
    assert heavy.verdict == "UNSTABLE"
    d = rep.to_dict()
    assert {"mu", "b", "T", "bound_rhs", "psi_moment@1000", "psi_moment@2000", "verdict", "ess"} <= set(d)
    with pytest.raises(SubcriticalError):
        admissibility_check(constant(1.0), PsiParams(0.5, 0.5, 1.0), 10)


def test_drift_shift(ens):
    assert np.array_equal(drift_shifted_ensemble(ens, constant_measure_change(ens, 0.0)).increments, ens.increments)
    q = drift_shifted_ensemble(ens, constant_measure_change(ens, 0.5))
    assert np.allclose(q.terminal()[:, 0], ens.terminal()[:, 0] - 0.5, atol=1e-12)


def test_residual_identity_under_shift(ens):
    small = ens.subset(5000)
    f = cubic_decay(0.0)
    sol = solve(BsdeProblem(small.grid, f, bounded_sin()), small, RegressionBasis(5))
    mc = build_measure_change(small, f, sol)
    q = drift_shifted_ensemble(small, mc)
    assert np.array_equal(one_step_residuals(q, sol, f, drop_z=True), one_step_residuals(small, sol, f))
    # affine in z: the z-term moves into the drift of W^Q
    g = linear(-1.0, 0.5, 0.0)
    sol = solve(BsdeProblem(small.grid, g, bounded_sin()), small, RegressionBasis(5))
    q = drift_shifted_ensemble(small, build_measure_change(small, g, sol))
    assert np.allclose(one_step_residuals(q, sol, g, drop_z=True), one_step_residuals(small, sol, g), atol=1e-12)


def test_exp_moment_constant_kernel(ens):
    # with a constant kernel the bound holds with equality: E exp(b^2 W_T^2 / 2 mu^2) = (1 - b^2 T / mu^2)^{-1/2}
    kernel = AdaptedProcess.constant(ens, 0.5)
    m, se = exp_moment_estimate(ens, kernel, 1.0)
    assert abs(m - 0.75**-0.5) <= 4 * se


def test_transfer_bound_on_bounded_problem(ens):
    p = BsdeProblem(ens.grid, cubic_decay(0.5), bounded_sin())
    small = ens.subset(10_000)
    sol = solve(p, small, RegressionBasis(5))
    mc = build_measure_change(small, p.f, sol)
    tau = np.full(small.n_paths, 10)
    c = q_transfer_check(sol.Y[:, 10], tau, mc, PsiParams(1.0, 0.5, 1.0))
    assert c["holds"] and c["lhs"] < c["rhs"]
