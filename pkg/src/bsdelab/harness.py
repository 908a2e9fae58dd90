"""Experiment drivers: uniqueness, a-priori bound, comparison, stability and class-(D) diagnostics.

Every driver returns an :class:`~bsdelab.reports.ExperimentReport`.  Drivers
only read solver output; reports carry digests of the solutions consumed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import nnls

from .engine import BrownianEnsemble, TimeGrid, mean_and_stderr, refine, simulate_brownian
from .errors import DomainError, HypothesisViolation, InadmissibleTerminal
from .generators import (GeneratorSpec, Sampler, TerminalSpec, check_linear_growth_A4, check_lipschitz_y_A5,
                         check_lipschitz_z_A2, check_osgood_A1, linear)
from .measure import admissibility_check, q_transfer_check
from .psi import PsiParams, psi
from .reports import ExperimentReport
from .solver import BsdeProblem, RegressionBasis, SolutionEnsemble, apriori_rhs, closed_form_field, solve

HYPOTHESIS_SAMPLES = 20_000


def _sup_node_mean_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.mean(np.abs(a - b), axis=0)))


def _inputs(ens: BrownianEnsemble, basis=None, **extra) -> dict:
    out = {"seed": ens.seed, "T": ens.grid.horizon, "M": ens.grid.M, "n_paths": ens.n_paths, "d": ens.d,
           "ensemble_digest": ens.digest()}
    if basis is not None:
        out["basis"] = basis.describe() if isinstance(basis, RegressionBasis) else [b.describe() for b in basis]
    out.update(extra)
    return out


def _require(report, what: str) -> None:
    if not report.passed:
        raise HypothesisViolation(f"{what} failed on sampled inputs: {report.to_dict()}")


# ---------------------------------------------------------------- tolerances


@dataclass(frozen=True)
class ErrorModel:
    """Discretization plus statistical budget  C1 dt + C2 / sqrt(n)."""

    C1: float
    C2: float

    def at(self, dt: float, n: int) -> float:
        return self.C1 * dt + self.C2 / math.sqrt(n)

    def to_dict(self) -> dict:
        return {"C1": self.C1, "C2": self.C2}

    @classmethod
    def fit(cls, err_coarse: float, err_fine: float, dt: float, n: int) -> "ErrorModel":
        """Two grid levels (dt and dt/2) at the same n; negative slopes collapse to a pure noise term."""
        c1 = 2.0 * (err_coarse - err_fine) / dt
        if c1 <= 0.0:
            return cls(0.0, max(err_coarse, err_fine) * math.sqrt(n))
        c2 = max(err_coarse - c1 * dt, 0.0) * math.sqrt(n)
        return cls(c1, c2)


# ---------------------------------------------------------------- stopping times


@dataclass(frozen=True)
class StoppingRule:
    name: str
    rule: Callable[[BrownianEnsemble, SolutionEnsemble], np.ndarray]


def _first_hit(X: np.ndarray, level: float) -> np.ndarray:
    """First node with X >= level, M when never; decided from the history up to each node."""
    hit = X >= level
    idx = np.argmax(hit, axis=1)
    idx[~hit.any(axis=1)] = X.shape[1] - 1
    return idx


@dataclass
class StoppingTimeFamily:
    rules: list = field(default_factory=list)

    def __len__(self):
        return len(self.rules)

    @classmethod
    def default(cls, fractions=(0.0, 0.25, 0.5, 0.75, 1.0), w_levels=(0.5, 1.0), y_quantile=0.9):
        rules = []
        for q in fractions:
            rules.append(StoppingRule(f"node@{q:g}T",
                                      lambda ens, sol, q=q: np.full(ens.n_paths, ens.grid.node_at(q * ens.grid.horizon))))
        for lvl in w_levels:
            rules.append(StoppingRule(f"hit|W|>={lvl:g}",
                                      lambda ens, sol, lvl=lvl: _first_hit(np.abs(ens.levels()[:, :, 0]), lvl)))
        if y_quantile is not None:
            def y_rule(ens, sol, q=y_quantile):
                # the level is a constant read off the sample; the decision per path stays adapted
                A = np.abs(sol.Y)
                return _first_hit(A, float(np.quantile(A, q)))
            rules.append(StoppingRule(f"hit|Y|>=q{y_quantile:g}", y_rule))
        return cls(rules)

    def evaluate(self, ens: BrownianEnsemble, sol: SolutionEnsemble) -> dict:
        if not self.rules:
            raise DomainError("empty stopping family")
        return {r.name: r.rule(ens, sol) for r in self.rules}

    def names(self) -> list:
        return [r.name for r in self.rules]


# ---------------------------------------------------------------- class (D)

DEFAULT_K_LADDER = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
EPS_UI = 1e-3


def tail_functional(values: np.ndarray, K: float) -> float:
    """mean(v 1_{v > K}); nonincreasing in K for nonnegative v, also in floating point."""
    return float(np.where(values > K, values, 0.0).sum() / values.size)


def class_d_diagnostic(ens: BrownianEnsemble, sol: SolutionEnsemble, taus: StoppingTimeFamily, params: PsiParams,
                       K_ladder=DEFAULT_K_LADDER, eps_ui: float = EPS_UI, mc=None) -> ExperimentReport:
    """Tail functional E[psi(|Y_tau|); psi > K] over a K ladder, worst case over the stopping family.

    With a measure change ``mc`` also checks E^Q|Y_tau| against its psi-moment bound for every tau.
    """
    if sol.grid != ens.grid:
        raise DomainError("solution and stopping rules must live on the same grid")
    stops = taus.evaluate(ens, sol)
    K_ladder = sorted(float(k) for k in K_ladder)
    rows = []
    for name, idx in stops.items():
        v = psi(np.abs(sol.Y[np.arange(ens.n_paths), idx]), params.mu)
        for K in K_ladder:
            rows.append({"tau": name, "K": K, "tail": tail_functional(v, K)})
    worst = [max(r["tail"] for r in rows if r["K"] == K) for K in K_ladder]
    rep = ExperimentReport("class-d", inputs=_inputs(ens, stopping=taus.names(), K_ladder=K_ladder, mu=params.mu))
    for K, w in zip(K_ladder, worst):
        rep.add(f"tail@K={K:g}", w)
    rep.add("final_tail", worst[-1])
    rep.rules["tail_nonincreasing_in_K"] = all(b <= a for a, b in zip(worst, worst[1:]))
    rep.rules["final_tail_below_eps"] = worst[-1] < eps_ui
    rep.details["eps_ui"] = eps_ui
    if mc is not None:
        checks = {name: q_transfer_check(sol.Y[np.arange(ens.n_paths), idx], idx, mc, params)
                  for name, idx in stops.items()}
        for name, c in checks.items():
            rep.add(f"EQ|Y_tau|[{name}]", c["lhs"], c["lhs_stderr"])
        rep.details["q_transfer"] = checks
        rep.rules["q_transfer_bound_holds"] = all(c["holds"] for c in checks.values())
    rep.digests["solution"] = sol.digest()
    rep.series["tails"] = rows
    return rep


def heavy_tail_solution(ens: BrownianEnsemble, alpha: float = 1.0, seed: int = 0) -> SolutionEnsemble:
    """Synthetic Y with Pareto(alpha) magnitudes at every node: no finite psi-moment for alpha <= 1."""
    g = np.random.default_rng(seed)
    n, M = ens.n_paths, ens.grid.M
    Y = g.uniform(size=(n, M + 1)) ** (-1.0 / alpha)
    return SolutionEnsemble(Y, np.zeros((n, M, ens.d)), ens.grid, {"solver": "synthetic_pareto", "alpha": alpha})


def class_d_self_test(ens: BrownianEnsemble, params: PsiParams, K_ladder=DEFAULT_K_LADDER, eps_ui: float = EPS_UI,
                      alpha: float = 1.0, seed: int = 0) -> ExperimentReport:
    """The diagnostic run on an injected heavy tail; the self-test holds when it FAILs."""
    rep = class_d_diagnostic(ens, heavy_tail_solution(ens, alpha, seed), StoppingTimeFamily.default(), params,
                             K_ladder, eps_ui)
    rep.tag = "class-d-self-test"
    rep.details["diagnostic_verdict"] = rep.verdict
    rep.rules = {"diagnostic_rejects_heavy_tail": rep.verdict == "FAIL"}
    return rep


# ---------------------------------------------------------------- a-priori bound


def apriori_bound_experiment(problem: BsdeProblem, ens: BrownianEnsemble, sol: SolutionEnsemble, params: PsiParams,
                             basis: RegressionBasis = RegressionBasis(), max_violation: float = 0.01) -> ExperimentReport:
    """Fraction of (path, node) with |Y| above the regressed bound plus its regression band.

    Also fits psi(|Y_t|) ~ A + B E[psi(...) | F_t] over node means (nonnegative
    least squares) and reports the fit; those constants are never asserted.
    """
    params.require_supercritical()
    rhs, reg_tol, cond = apriori_rhs(problem, ens, basis, params)
    absY = np.abs(sol.Y)
    viol = absY > rhs + reg_tol[None, :]
    frac = float(np.mean(viol))
    lhs_mean = np.mean(psi(absY, params.mu), axis=0)
    cond_mean = np.mean(cond, axis=0)
    X = np.column_stack([np.ones_like(cond_mean), cond_mean])
    (A, B), resid = nnls(X, lhs_mean)
    rep = ExperimentReport("apriori", inputs=_inputs(ens, basis, mu=params.mu, b=params.b, a=problem.f.a))
    rep.add("violation_fraction", frac)
    rep.add("reg_tol_max", float(np.max(reg_tol)))
    rep.add("reg_tol_mean", float(np.mean(reg_tol)))
    rep.add("margin_min", float(np.min(rhs - absY)))
    rep.add("A_hat", A)
    rep.add("B_hat", B)
    rep.add("fit_residual", resid)
    rep.rules["violation_fraction_ok"] = frac <= max_violation
    rep.details["max_violation"] = max_violation
    rep.digests["solution"] = sol.digest()
    rep.series["nodes"] = [
        {"t": float(t), "abs_y_max": float(absY[:, i].max()), "rhs_min": float(rhs[:, i].min()),
         "reg_tol": float(reg_tol[i]), "violations": int(viol[:, i].sum()),
         "psi_y_mean": float(lhs_mean[i]), "cond_psi_mean": float(cond_mean[i])}
        for i, t in enumerate(ens.grid.nodes)
    ]
    return rep


# ---------------------------------------------------------------- uniqueness


def uniqueness_experiment(problem: BsdeProblem, ens: BrownianEnsemble, bases, tol_unique: ErrorModel,
                          schemes=("backward_euler", "picard"), sampler: Sampler | None = None,
                          check_hypotheses: bool = True, solver_kw: dict | None = None) -> ExperimentReport:
    """U = max over solver pairs of the sup-node mean |Y^i - Y^j|."""
    if len(bases) < 2 or len(set(b.describe() for b in bases)) < 2:
        raise DomainError("uniqueness needs two distinct regression bases")
    if check_hypotheses:
        sampler = sampler or Sampler(d=problem.d, horizon=problem.grid.horizon)
        _require(check_osgood_A1(problem.f, sampler, HYPOTHESIS_SAMPLES), "(A1)")
        _require(check_lipschitz_z_A2(problem.f, sampler, HYPOTHESIS_SAMPLES), "(A2)")
    solver_kw = solver_kw or {}
    sols = {}
    for scheme in schemes:
        for basis in bases:
            sols[f"{scheme}/{basis.describe()}"] = solve(problem, ens, basis, scheme, **solver_kw.get(scheme, {}))
    pairs = []
    for (k1, s1), (k2, s2) in itertools.combinations(sols.items(), 2):
        pairs.append({"a": k1, "b": k2, "sup_node_mean_abs": _sup_node_mean_abs(s1.Y, s2.Y)})
    U = max(p["sup_node_mean_abs"] for p in pairs)
    tol = tol_unique.at(float(np.max(ens.grid.dt)), ens.n_paths)
    rep = ExperimentReport("uniqueness", inputs=_inputs(ens, list(bases), schemes=list(schemes)))
    rep.add("U", U)
    rep.add("tol_unique", tol)
    for k, s in sols.items():
        rep.add(f"y0[{k}]", s.y0, s.y0_stderr)
    rep.rules["U_within_tol"] = U <= tol
    rep.details["tol_model"] = tol_unique.to_dict()
    rep.details["picard_converged"] = {k: s.meta.get("converged") for k, s in sols.items() if "converged" in s.meta}
    rep.digests = {k: s.digest() for k, s in sols.items()}
    rep.series["pairs"] = pairs
    return rep


# ---------------------------------------------------------------- comparison

COMPARISON_MODES = ("lipschitz_41", "osgood_43")


def _check_generator_order(f: GeneratorSpec, fp: GeneratorSpec, ens: BrownianEnsemble, sol_p: SolutionEnsemble,
                           tol: float = 1e-12) -> int:
    bad = 0
    for i in range(ens.grid.M):
        t = float(ens.grid.nodes[i])
        y, z = sol_p.Y[:, i], sol_p.Z[:, i, :]
        lhs = np.broadcast_to(f.eval(t, y, z), y.shape)
        rhs = np.broadcast_to(fp.eval(t, y, z), y.shape)
        bad += int(np.count_nonzero(lhs > rhs + tol * (1.0 + np.abs(rhs))))
    return bad


def comparison_experiment(first: BsdeProblem, second: BsdeProblem, ens: BrownianEnsemble, tol_cmp: ErrorModel,
                          mode: str = "osgood_43", basis: RegressionBasis = RegressionBasis(),
                          scheme: str = "backward_euler", sampler: Sampler | None = None,
                          probe_delta: float = 0.01, probe_node: int | None = None) -> ExperimentReport:
    """Solve (xi, f) and (xi', f') on one ensemble; V = mean over paths of max-node (Y - Y')^+."""
    if mode not in COMPARISON_MODES:
        raise DomainError(f"unknown comparison mode {mode!r}; known: {COMPARISON_MODES}")
    sampler = sampler or Sampler(d=first.d, horizon=first.grid.horizon)
    for p in (first, second):
        _require(check_osgood_A1(p.f, sampler, HYPOTHESIS_SAMPLES), "(A1)")
        _require(check_lipschitz_z_A2(p.f, sampler, HYPOTHESIS_SAMPLES), "(A2)")
        if mode == "lipschitz_41":
            _require(check_lipschitz_y_A5(p.f, sampler, HYPOTHESIS_SAMPLES), "(A5)")
    xi, xip = first.xi(ens), second.xi(ens)
    if np.any(xi > xip):
        raise HypothesisViolation(f"terminal values not ordered on {int(np.sum(xi > xip))} paths")
    sol = solve(first, ens, basis, scheme)
    sol_p = solve(second, ens, basis, scheme)
    bad = _check_generator_order(first.f, second.f, ens, sol_p)
    if bad:
        raise HypothesisViolation(f"f <= f' fails at {bad} (path, node) points along (Y', Z')")
    diff = sol.Y - sol_p.Y
    v_paths = np.max(np.maximum(diff, 0.0), axis=1)
    vp_paths = np.max(np.maximum(-diff, 0.0), axis=1)
    V, V_se = mean_and_stderr(v_paths)
    Vp, Vp_se = mean_and_stderr(vp_paths)
    tol = tol_cmp.at(float(np.max(ens.grid.dt)), ens.n_paths)
    rep = ExperimentReport("comparison", inputs=_inputs(ens, basis, mode=mode, scheme=scheme))
    rep.add("V", V, V_se)
    rep.add("V_swapped", Vp, Vp_se)
    rep.add("tol_cmp", tol)
    rep.add("violating_path_fraction", float(np.mean(v_paths > 0)))
    rep.rules["V_within_tol"] = V <= tol
    rep.details["tol_model"] = tol_cmp.to_dict()
    if mode == "lipschitz_41":
        rep.details["strict_probe"] = strict_comparison_probe(diff, ens.grid, probe_delta, probe_node)
    rep.digests = {"first": sol.digest(), "second": sol_p.digest()}
    rep.series["nodes"] = [
        {"t": float(t), "mean_diff": float(np.mean(diff[:, i])), "positive_part_mean": float(np.mean(np.maximum(diff[:, i], 0)))}
        for i, t in enumerate(ens.grid.nodes)
    ]
    return rep


def strict_comparison_probe(diff: np.ndarray, grid: TimeGrid, delta: float = 0.01, node: int | None = None) -> dict:
    """Spread of Y - Y' after a mid node on the event {|Y - Y'| < delta} there; informational."""
    node = grid.M // 2 if node is None else node
    event = np.abs(diff[:, node]) < delta
    out = {"node": node, "delta": delta, "event_fraction": float(np.mean(event)), "spread": []}
    if event.any():
        for j in range(node, grid.M + 1, max(1, (grid.M - node) // 5)):
            d = diff[event, j]
            out["spread"].append({"t": float(grid.nodes[j]), "min": float(d.min()), "max": float(d.max()),
                                  "mean": float(d.mean())})
    return out


# ---------------------------------------------------------------- stability


@dataclass
class StabilitySequence:
    """xi^n = xi^0 + eta / n and f^n = f^0 + l(n) over ``n_list``."""

    f0: GeneratorSpec
    xi0: TerminalSpec
    eta: TerminalSpec
    rate: Callable[[int], float] = lambda n: 1.0 / n
    n_list: tuple = (1, 2, 4, 8, 16)
    betas: tuple = (0.5, 0.9)
    terminal_scale: Callable[[int], float] = lambda n: 1.0 / n

    def __post_init__(self):
        if self.f0.affine_z is None:
            raise HypothesisViolation("f0 must be affine in z")

    def generator(self, n: int) -> GeneratorSpec:
        return self.f0.shifted(float(self.rate(n)))

    def terminal(self, n: int) -> TerminalSpec:
        return self.xi0.plus(self.eta, float(self.terminal_scale(n)))

    @classmethod
    def trivial(cls, f0, xi0, eta, n_list=(1, 2, 4, 8, 16), betas=(0.5, 0.9)) -> "StabilitySequence":
        """Zero perturbation through the same construction: l_n = 0 and a zero terminal shift."""
        return cls(f0, xi0, eta, lambda n: 0.0, n_list, betas, lambda n: 0.0)


def _nonincreasing_within(values, stderrs, k: float = 3.0) -> bool:
    return all(b <= a + k * math.hypot(sa, sb) for a, b, sa, sb in zip(values, values[1:], stderrs, stderrs[1:]))


def stability_metrics(Yn, Y0, Zn, Z0, dt, mu, betas) -> dict:
    """S1, S2(beta), S3 with standard errors under the shared-ensemble coupling."""
    pY = psi(np.abs(Yn - Y0), mu)
    node_means = np.mean(pY, axis=0)
    k = int(np.argmax(node_means))
    out = {"S1": (float(node_means[k]), mean_and_stderr(pY[:, k])[1])}
    sup_psi = np.max(pY, axis=1)
    dz = np.einsum("nik,nik->ni", Zn - Z0, Zn - Z0)
    qv = np.sum(dz * dt[None, :], axis=1)
    for beta in betas:
        out[f"S2[beta={beta:g}]"] = mean_and_stderr(sup_psi**beta + qv ** (beta / 2.0))
    out["S3"] = mean_and_stderr(sup_psi)
    return out


def stability_experiment(seq: StabilitySequence, ens: BrownianEnsemble, params: PsiParams, tol_stab: float,
                         basis: RegressionBasis = RegressionBasis(), scheme: str = "backward_euler",
                         mode: str = "ii", admissibility_n: int = 100_000, noise_k: float = 3.0,
                         sampler: Sampler | None = None) -> ExperimentReport:
    if mode not in ("i", "ii"):
        raise DomainError("mode must be 'i' or 'ii'")
    params.require_supercritical()
    adm = admissibility_check(seq.eta, params, admissibility_n, seed=ens.seed)
    if not adm.admissible:
        raise InadmissibleTerminal(f"envelope eta failed the admissibility check: {adm.to_dict()}")
    sampler = sampler or Sampler(d=ens.d, horizon=ens.grid.horizon)
    gens = [seq.f0] + [seq.generator(n) for n in seq.n_list]
    for g in gens:
        _require(check_osgood_A1(g, sampler, HYPOTHESIS_SAMPLES), f"(A1) for {g.name}")
        _require(check_lipschitz_z_A2(g, sampler, HYPOTHESIS_SAMPLES), f"(A2) for {g.name}")
        if g.a is not None:
            _require(check_linear_growth_A4(g, sampler, HYPOTHESIS_SAMPLES), f"(A4) for {g.name}")
    grid = ens.grid
    sol0 = solve(BsdeProblem(grid, seq.f0, seq.xi0, ens.d), ens, basis, scheme)
    names = ["S1"] + [f"S2[beta={b:g}]" for b in seq.betas] + (["S3"] if mode == "ii" else [])
    table = {k: [] for k in names}
    rows = []
    digests = {"base": sol0.digest()}
    for n in seq.n_list:
        sol = solve(BsdeProblem(grid, seq.generator(n), seq.terminal(n), ens.d), ens, basis, scheme)
        digests[f"n={n}"] = sol.digest()
        m = stability_metrics(sol.Y, sol0.Y, sol.Z, sol0.Z, grid.dt, params.mu, seq.betas)
        row = {"n": n}
        for k in names:
            table[k].append(m[k])
            row[k], row[f"{k}_stderr"] = m[k]
        rows.append(row)
    rep = ExperimentReport("stability", inputs=_inputs(ens, basis, mode=mode, scheme=scheme, n_list=list(seq.n_list),
                                                        mu=params.mu))
    for k in names:
        vals = [v for v, _ in table[k]]
        ses = [s for _, s in table[k]]
        for n, v, s in zip(seq.n_list, vals, ses):
            rep.add(f"{k}@n={n}", v, s)
        rep.rules[f"{k}_nonincreasing"] = _nonincreasing_within(vals, ses, noise_k)
    final = table["S1"][-1][0]
    rep.add("tol_stab", tol_stab)
    rep.rules["final_S1_within_tol"] = final <= tol_stab
    rep.details["admissibility"] = adm.to_dict()
    rep.details["noise_k"] = noise_k
    rep.digests = digests
    rep.series["metrics"] = rows
    return rep


# ---------------------------------------------------------------- calibration


@dataclass(frozen=True)
class Calibration:
    """Frozen tolerances for one (T, M, n); see :func:`calibrate`."""

    T: float
    M: int
    n_paths: int
    unique: ErrorModel
    cmp: ErrorModel
    stab: float
    evidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"T": self.T, "M": self.M, "n_paths": self.n_paths, "tol_unique": self.unique.to_dict(),
                "tol_cmp": self.cmp.to_dict(), "tol_stab": self.stab, "evidence": self.evidence}


def _oracle_errors(problem, ens, bases, schemes):
    exact = closed_form_field(problem, ens)
    sup_mean, mean_max = 0.0, 0.0
    for scheme in schemes:
        for basis in bases:
            err = np.abs(solve(problem, ens, basis, scheme).Y - exact)
            sup_mean = max(sup_mean, float(np.max(np.mean(err, axis=0))))
            mean_max = max(mean_max, float(np.mean(np.max(err, axis=1))))
    return sup_mean, mean_max


def calibrate(T: float, M: int, n_paths: int, seed: int, bases, schemes=("backward_euler", "picard"),
              oracle_f: GeneratorSpec | None = None, oracle_xi: TerminalSpec | None = None,
              stability: StabilitySequence | None = None, mu: float = 1.0) -> Calibration:
    """Fit tolerances from an affine problem with an exact solution at (M, n) and (2M, n).

    Every solver/basis pair is compared with the closed form on a base
    ensemble and on its Brownian-bridge refinement.  With E the worst error,
    a difference of two solutions is within 2E of the difference of the
    exact ones, so

    * tol_unique = 2 (C1 dt + C2 / sqrt n) fitted to sup-node mean errors,
    * tol_cmp    = 2 (C1 dt + C2 / sqrt n) fitted to mean max-node errors,
    * tol_stab   = max-node mean psi(|dY_exact| + tol_unique) at the last n of
      the stability sequence, where dY_exact comes from the closed form.
    """
    from .generators import bounded_sin

    oracle_f = oracle_f or linear(-1.0, 0.5, 0.0)
    oracle_xi = oracle_xi or bounded_sin()
    ens = simulate_brownian(TimeGrid.uniform(T, M), 1, n_paths, seed)
    fine = refine(ens)
    coarse_err = _oracle_errors(BsdeProblem(ens.grid, oracle_f, oracle_xi), ens, bases, schemes)
    fine_err = _oracle_errors(BsdeProblem(fine.grid, oracle_f, oracle_xi), fine, bases, schemes)
    dt = T / M
    um = ErrorModel.fit(coarse_err[0], fine_err[0], dt, n_paths)
    cm = ErrorModel.fit(coarse_err[1], fine_err[1], dt, n_paths)
    unique = ErrorModel(2.0 * um.C1, 2.0 * um.C2)
    cmp = ErrorModel(2.0 * cm.C1, 2.0 * cm.C2)
    evidence = {"oracle": f"{oracle_f.name}{oracle_f.params} / {oracle_xi.description}{oracle_xi.params}",
                "sup_node_mean_err": {"M": coarse_err[0], "2M": fine_err[0]},
                "mean_max_node_err": {"M": coarse_err[1], "2M": fine_err[1]},
                "seed": seed, "bases": [b.describe() for b in bases], "schemes": list(schemes)}
    stab = math.nan
    if stability is not None:
        n_last = stability.n_list[-1]
        base = BsdeProblem(ens.grid, stability.f0, stability.xi0)
        pert = BsdeProblem(ens.grid, _shifted_linear(stability.f0, stability.rate(n_last)), stability.terminal(n_last))
        dY = closed_form_field(pert, ens) - closed_form_field(base, ens)
        slack = unique.at(dt, n_paths)
        stab = float(np.max(np.mean(psi(np.abs(dY) + slack, mu), axis=0)))
        evidence["stability_exact_S1"] = float(np.max(np.mean(psi(np.abs(dY), mu), axis=0)))
    return Calibration(T, M, n_paths, unique, cmp, stab, evidence)


def _shifted_linear(f: GeneratorSpec, c: float) -> GeneratorSpec:
    if f.name not in ("linear", "zero"):
        raise DomainError("calibration of tol_stab needs an affine base generator")
    p = {"a": 0.0, "b": 0.0, "c": 0.0, **f.params}
    return linear(p["a"], p["b"], p["c"] + c)
