"""Girsanov change of measure: densities, Q-expectations, measure-solution prices, admissibility."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (AdaptedProcess, BrownianEnsemble, DensityPath, TimeGrid, ito_integral, mean_and_stderr,
                     simulate_brownian, stochastic_exponential)
from .errors import BoundViolation, EffectiveSampleSizeError, InadmissibleTerminal
from .generators import GeneratorSpec, TerminalSpec, girsanov_kernel
from .psi import PsiParams, exp_moment_bound, psi
from .solver import SolutionEnsemble

ESS_FLOOR = 0.1
STABILITY_THRESHOLD = 0.2


@dataclass(frozen=True, eq=False)
class MeasureChange:
    kernel: AdaptedProcess
    bound: float
    density_path: DensityPath

    @property
    def log_density(self) -> np.ndarray:
        return self.density_path.log_density

    def density(self, node: int) -> np.ndarray:
        return self.density_path.at(node)


@dataclass(frozen=True)
class QEstimate:
    value: float
    stderr: float
    ess: float
    n: int

    @property
    def ess_fraction(self) -> float:
        return self.ess / self.n


def build_measure_change(ens: BrownianEnsemble, f: GeneratorSpec, sol: SolutionEnsemble) -> MeasureChange:
    """Kernel g_i = girsanov_kernel(f, t_i, Y_i, Z_i) and its stochastic exponential."""
    if sol.grid != ens.grid or sol.Y.shape[0] != ens.n_paths:
        raise ValueError("solution is not aligned with the ensemble")
    g = np.empty_like(ens.increments)
    for i in range(ens.grid.M):
        g[:, i, :] = girsanov_kernel(f, float(ens.grid.nodes[i]), sol.Y[:, i], sol.Z[:, i, :])
    kernel = AdaptedProcess.from_array(g)
    try:
        dens = stochastic_exponential(ens, kernel, bound=f.b)
    except BoundViolation as exc:
        raise BoundViolation(f"Girsanov kernel exceeds b={f.b}; the z-Lipschitz declaration is false ({exc})") from None
    return MeasureChange(kernel, f.b, dens)


def constant_measure_change(ens: BrownianEnsemble, c) -> MeasureChange:
    kernel = AdaptedProcess.constant(ens, c)
    bound = float(np.linalg.norm(np.broadcast_to(np.asarray(c, dtype=float), (ens.d,))))
    return MeasureChange(kernel, bound, stochastic_exponential(ens, kernel, bound))


def q_expectation(values, mc: MeasureChange, at: int | None = None, ess_floor: float = ESS_FLOOR) -> QEstimate:
    """Importance-weighted mean  sum_p values_p D_at,p / n  with its standard error.

    ``values`` must be measurable at node ``at`` (default: the last node).
    Raises :class:`EffectiveSampleSizeError` when ESS / n drops below
    ``ess_floor``.
    """
    values = np.asarray(values, dtype=float)
    at = mc.log_density.shape[1] - 1 if at is None else at
    w = mc.density(at)
    n = w.size
    prod = values * w
    mean = float(prod.sum() / n)
    se = float(math.sqrt(((prod - mean) ** 2).sum() / (n - 1) / n)) if n > 1 else math.inf
    ess = float(w.sum() ** 2 / (w * w).sum())
    if ess < ess_floor * n:
        raise EffectiveSampleSizeError(f"effective sample size {ess:.1f} below {ess_floor} * n = {ess_floor * n:.1f}")
    return QEstimate(mean, se, ess, n)


@dataclass
class AdmissibilityReport:
    mu: float
    b: float
    T: float
    n: int
    psi_moment_n: float
    psi_moment_2n: float
    bound_rhs: float
    verdict: str
    relative_change: float
    ess: float | None = None
    threshold: float = STABILITY_THRESHOLD
    psi_moment_4n: float | None = None

    @property
    def admissible(self) -> bool:
        return self.verdict == "ADMISSIBLE"

    def to_dict(self) -> dict:
        return {
            "mu": self.mu, "b": self.b, "T": self.T,
            "bound_rhs": self.bound_rhs,
            f"psi_moment@{self.n}": self.psi_moment_n,
            f"psi_moment@{2 * self.n}": self.psi_moment_2n,
            f"psi_moment@{4 * self.n}": self.psi_moment_4n,
            "relative_change": self.relative_change,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "ess": self.ess,
        }


def admissibility_check(
    xi: TerminalSpec,
    params: PsiParams,
    n: int,
    grid: TimeGrid | None = None,
    seed: int = 0,
    threshold: float = STABILITY_THRESHOLD,
    d: int = 1,
) -> AdmissibilityReport:
    """Monte-Carlo estimate of E[psi(|xi|, mu)] at n, 2n and 4n paths and the sufficient bound on E^Q|xi|.

    The larger ensembles contain the smaller ones as their first paths.
    Verdict is ADMISSIBLE when every estimate is finite and both doublings
    change it by less than ``threshold`` relative; ``relative_change`` is the
    larger of the two.  An infinite-mean moment passes one doubling by luck
    fairly often, two much more rarely.  This is a stability heuristic, not a proof.
    """
    params.require_supercritical()
    grid = grid or TimeGrid.uniform(params.horizon, 1)
    ens = simulate_brownian(grid, d, 4 * n, seed)
    x = np.abs(xi(ens))
    with np.errstate(over="ignore", invalid="ignore"):
        vals = psi(x, params.mu)
    m = [float(vals[:k].sum() / k) for k in (n, 2 * n, 4 * n)]
    finite = all(math.isfinite(v) for v in m)
    change = max(_relative_change(a, b) for a, b in zip(m, m[1:])) if finite else math.inf
    verdict = "ADMISSIBLE" if finite and change < threshold else "UNSTABLE"
    bound = exp_moment_bound(params, 0.0) + math.exp(2.0 * params.mu**2) * m[2] if finite else math.inf
    return AdmissibilityReport(params.mu, params.b, params.horizon, n, m[0], m[1], bound, verdict, change,
                               threshold=threshold, psi_moment_4n=m[2])


def _relative_change(a: float, b: float) -> float:
    if a != 0.0:
        return abs(b - a) / abs(a)
    return 0.0 if b == 0.0 else math.inf


def measure_solution_price(
    xi: TerminalSpec,
    ens: BrownianEnsemble,
    mc: MeasureChange,
    admissibility: AdmissibilityReport | None = None,
    override: bool = False,
) -> QEstimate:
    """Y_0 = E^Q[xi] by importance weighting on the original paths.

    Requires an ADMISSIBLE report unless ``override`` is set.
    """
    if not override:
        if admissibility is None:
            raise InadmissibleTerminal("no admissibility report supplied (pass override=True to skip)")
        if not admissibility.admissible:
            raise InadmissibleTerminal(f"terminal value failed the admissibility check: {admissibility.to_dict()}")
    return q_expectation(xi(ens), mc, at=ens.grid.M)


def drift_shifted_ensemble(ens: BrownianEnsemble, mc: MeasureChange) -> BrownianEnsemble:
    """Increments of W^Q = W - int g ds."""
    inc = ens.increments - mc.kernel.values * ens.grid.dt[None, :, None]
    return BrownianEnsemble(ens.grid, inc, ens.seed, tag="Q", refinements=ens.refinements)


def one_step_residuals(ens: BrownianEnsemble, sol: SolutionEnsemble, f: GeneratorSpec, drop_z: bool = False) -> np.ndarray:
    """Y_i - (Y_{i+1} + f(t_i, Y_i, Z_i) dt_i - Z_i . dW_i) for every (path, step).

    With ``drop_z`` the generator is evaluated at z = 0, which is the form the
    equation takes under the drift-shifted increments.
    """
    M = ens.grid.M
    out = np.empty((ens.n_paths, M))
    for i in range(M):
        z = sol.Z[:, i, :]
        zf = np.zeros_like(z) if drop_z else z
        fv = np.broadcast_to(f.eval(float(ens.grid.nodes[i]), sol.Y[:, i], zf), (ens.n_paths,))
        out[:, i] = sol.Y[:, i] - (sol.Y[:, i + 1] + fv * ens.grid.dt[i] - np.einsum("nk,nk->n", z, ens.increments[:, i, :]))
    return out


def exp_moment_estimate(ens: BrownianEnsemble, kernel: AdaptedProcess, mu: float) -> tuple[float, float]:
    """MC estimate of E[exp(|int_0^T q dW|^2 / (2 mu^2))] with its standard error."""
    I = ito_integral(ens, kernel)
    return mean_and_stderr(np.exp(I * I / (2.0 * mu * mu)))


def q_expectation_stopped(values, mc: MeasureChange, tau, ess_floor: float = ESS_FLOOR) -> QEstimate:
    """As :func:`q_expectation` for values measurable at a node-valued stopping time ``tau`` (per path)."""
    values = np.asarray(values, dtype=float)
    tau = np.asarray(tau, dtype=int)
    w = mc.log_density[np.arange(values.size), tau]
    w = np.exp(w)
    n = w.size
    prod = values * w
    mean = float(prod.sum() / n)
    se = float(math.sqrt(((prod - mean) ** 2).sum() / (n - 1) / n)) if n > 1 else math.inf
    ess = float(w.sum() ** 2 / (w * w).sum())
    if ess < ess_floor * n:
        raise EffectiveSampleSizeError(f"effective sample size {ess:.1f} below {ess_floor} * n = {ess_floor * n:.1f}")
    return QEstimate(mean, se, ess, n)


def q_transfer_check(y_tau, tau, mc: MeasureChange, params: PsiParams) -> dict:
    """E^Q|Y_tau| against (1 - b^2 T / mu^2)^{-1/2} + e^{2 mu^2} E[psi(|Y_tau|, mu)], with a 3-stderr band."""
    params.require_supercritical()
    a = np.abs(np.asarray(y_tau, dtype=float))
    q = q_expectation_stopped(a, mc, tau)
    m, se = mean_and_stderr(psi(a, params.mu))
    scale = math.exp(2.0 * params.mu**2)
    rhs = exp_moment_bound(params, 0.0) + scale * m
    band = 3.0 * math.hypot(q.stderr, scale * se)
    return {"lhs": q.value, "lhs_stderr": q.stderr, "rhs": rhs, "rhs_stderr": scale * se, "ess": q.ess,
            "holds": bool(q.value <= rhs + band)}
