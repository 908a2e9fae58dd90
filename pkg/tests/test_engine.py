import math

import numpy as np
import pytest

from bsdelab.engine import (AdaptedProcess, BrownianEnsemble, TimeGrid, ito_integral, ito_integral_path,
                            mean_and_stderr, refine, simulate_brownian, stochastic_exponential)
from bsdelab.errors import BoundViolation, DimensionMismatch, DomainError, ResourceBudgetError


def test_grid_validation():
    with pytest.raises(DomainError):
        TimeGrid(np.array([0.1, 1.0]))
    with pytest.raises(DomainError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))
    with pytest.raises(DomainError):
        TimeGrid.uniform(1.0, 0)
    g = TimeGrid.uniform(2.0, 4)
    assert g.M == 4 and g.horizon == 2.0 and np.allclose(g.dt, 0.5)
    assert g.node_at(1.1) == 2
    fine = g.refined()
    assert fine.M == 8 and np.array_equal(fine.nodes[0::2], g.nodes)
    assert g == TimeGrid.uniform(2.0, 4) and hash(g) == hash(TimeGrid.uniform(2.0, 4))


def test_simulation_is_deterministic_and_prefix_stable():
    g = TimeGrid.uniform(1.0, 8)
    a = simulate_brownian(g, 2, 300, seed=9)
    b = simulate_brownian(g, 2, 300, seed=9)
    assert np.array_equal(a.increments, b.increments) and a.digest() == b.digest()
    small = simulate_brownian(g, 2, 120, seed=9)
    assert np.array_equal(a.subset(120).increments, small.increments)
    tail = simulate_brownian(g, 2, 180, seed=9, first_path=120)
    assert np.array_equal(a.increments[120:], tail.increments)
    assert a.digest() != simulate_brownian(g, 2, 300, seed=10).digest()


def test_ensemble_is_read_only():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 3), 1, 10, 0)
    with pytest.raises(ValueError):
        ens.increments[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        ens.levels()[0, 0, 0] = 1.0


def test_terminal_distribution_clt():
    T = 1.5
    ens = simulate_brownian(TimeGrid.uniform(T, 20), 1, 40_000, seed=2)
    wt = ens.terminal()[:, 0]
    n = wt.size
    assert abs(wt.mean()) < 4 * math.sqrt(T / n)
    assert abs(wt.var() - T) < 4 * T * math.sqrt(2.0 / n)
    inc = ens.increments[:, 3, 0]
    assert abs(inc.var() - T / 20) < 4 * (T / 20) * math.sqrt(2.0 / n)
    # independent increments
    corr = np.corrcoef(ens.increments[:, 3, 0], ens.increments[:, 4, 0])[0, 1]
    assert abs(corr) < 4 / math.sqrt(n)


def test_refine_preserves_coarse_levels_and_variance():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 10), 1, 20_000, seed=4)
    fine = refine(ens)
    assert fine.grid.M == 20 and fine.refinements == 1
    assert np.max(np.abs(fine.levels()[:, 0::2] - ens.levels())) <= 1e-12
    half = fine.increments[:, 0::2, 0]
    n = half.shape[0]
    assert abs(half.var(axis=0).mean() - 0.05) < 4 * 0.05 * math.sqrt(2.0 / (n * 10))
    # the two halves of one coarse step are uncorrelated
    c = np.corrcoef(fine.increments[:, 0, 0], fine.increments[:, 1, 0])[0, 1]
    assert abs(c) < 4 / math.sqrt(n)
    assert not np.array_equal(refine(fine).increments[:, 0], fine.increments[:, 0])


def test_memory_budget():
    with pytest.raises(ResourceBudgetError):
        simulate_brownian(TimeGrid.uniform(1.0, 100), 2, 1000, 0, memory_budget=10_000)


def test_ito_integral_of_constant_and_of_w():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 16), 1, 2000, seed=5)
    c = AdaptedProcess.constant(ens, 0.7)
    assert np.allclose(ito_integral(ens, c), 0.7 * ens.terminal()[:, 0], atol=1e-12)
    W = AdaptedProcess.from_rule(ens, lambda i, t, hist: hist[:, -1, :])
    # discrete Ito identity: sum W_i dW_i = (W_T^2 - sum dW_i^2) / 2
    lhs = ito_integral(ens, W)
    rhs = 0.5 * (ens.terminal()[:, 0] ** 2 - np.sum(ens.increments[:, :, 0] ** 2, axis=1))
    assert np.max(np.abs(lhs - rhs)) < 1e-12
    path = ito_integral_path(ens, W)
    assert np.allclose(path[:, -1], lhs, atol=1e-12) and np.all(path[:, 0] == 0)
    assert np.allclose(ito_integral(ens, W, up_to=5), path[:, 5], atol=1e-12)


def test_from_rule_sees_only_history():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 6), 1, 5, seed=1)
    seen = []
    AdaptedProcess.from_rule(ens, lambda i, t, hist: (seen.append(hist.shape[1]), hist[:, -1, :])[1])
    assert seen == [1, 2, 3, 4, 5, 6]


def test_stochastic_exponential_closed_form_and_moments():
    T, c = 1.0, 0.5
    ens = simulate_brownian(TimeGrid.uniform(T, 10), 1, 50_000, seed=8)
    dens = stochastic_exponential(ens, AdaptedProcess.constant(ens, c), bound=c)
    expected = c * ens.levels()[:, :, 0] - 0.5 * c * c * ens.grid.nodes[None, :]
    assert np.max(np.abs(dens.log_density - expected)) < 1e-12
    m, se = mean_and_stderr(dens.at(ens.grid.M))
    assert abs(m - 1.0) < 4 * se
    m2, se2 = mean_and_stderr(dens.at(ens.grid.M) ** 2)
    assert abs(m2 - math.exp(c * c * T)) < 4 * se2


def test_bound_violation_and_shape_checks():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 4), 1, 10, 0)
    with pytest.raises(BoundViolation):
        stochastic_exponential(ens, AdaptedProcess.constant(ens, 0.6), bound=0.5)
    with pytest.raises(DimensionMismatch):
        ito_integral(ens, AdaptedProcess(np.zeros((10, 3, 1))))
    with pytest.raises(DimensionMismatch):
        BrownianEnsemble(ens.grid, np.zeros((3, 2, 1)), 0)


def test_exports(tmp_path):
    ens = simulate_brownian(TimeGrid.uniform(1.0, 3), 2, 4, 3)
    ens.to_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "path,step,dim,increment" and len(rows) == 1 + 4 * 3 * 2
    assert float(rows[1].split(",")[3]) == ens.increments[0, 0, 0]
    ens.to_npz(tmp_path / "e.npz")
    data = np.load(tmp_path / "e.npz")
    assert np.array_equal(data["increments"], ens.increments)
