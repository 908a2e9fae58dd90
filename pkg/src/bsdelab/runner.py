"""Turn a validated config into reports."""

from __future__ import annotations

import math

from .config import ExperimentConfig
from .engine import TimeGrid, mean_and_stderr, refine, simulate_brownian
from .errors import ConfigError
from .generators import make_generator, make_terminal
from .harness import (ErrorModel, StabilitySequence, StoppingTimeFamily, apriori_bound_experiment, class_d_diagnostic,
                      class_d_self_test, comparison_experiment, stability_experiment, uniqueness_experiment)
from .measure import (admissibility_check, build_measure_change, constant_measure_change, exp_moment_estimate,
                      measure_solution_price)
from .psi import PsiParams, exp_moment_bound, run_inequality_suite
from .reports import ExperimentReport
from .solver import BsdeProblem, RegressionBasis, closed_form_for, solve


def _grid(cfg):
    return TimeGrid.uniform(cfg.grid.T, cfg.grid.M)


def _ensemble(cfg, grid=None):
    return simulate_brownian(grid or _grid(cfg), cfg.ensemble.d, cfg.ensemble.n_paths, cfg.ensemble.seed)


def _basis(b):
    return RegressionBasis(b.degree, b.ridge)


def _generator(spec):
    f = make_generator(spec.name, dict(spec.params))
    return f.shifted(spec.shift) if spec.shift else f


def _terminal(spec):
    if spec.shift:
        raise ConfigError(f"'shift' applies to generators only (terminal {spec.name!r})")
    return make_terminal(spec.name, dict(spec.params))


def _problem(cfg, grid, generator=None, terminal=None):
    g = generator or cfg.generator
    t = terminal or cfg.terminal
    return BsdeProblem(grid, _generator(g), _terminal(t), cfg.ensemble.d)


def _params(cfg, f=None):
    return PsiParams(cfg.psi.mu, 0.0 if f is None else f.b, cfg.grid.T)


def _within(diff, scale, stderr, tol, extra=0.0):
    """|diff| <= max(rel |scale|, k stderr + extra)."""
    return abs(diff) <= max(tol.rel * abs(scale), tol.stderr_k * stderr + extra)


# ---------------------------------------------------------------- kinds


def run_psi_check(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("psi_check")
    rep = ExperimentReport("psi-check", inputs={"samples": sec.samples, "seed": cfg.ensemble.seed, "mu": cfg.psi.mu})
    for r in run_inequality_suite(sec.samples, cfg.ensemble.seed):
        rep.add(f"violations[{r.name}]", r.violations)
        rep.add(f"min_scaled_residual[{r.name}]", r.min_scaled_residual)
        rep.rules[f"no_violations[{r.name}]"] = r.violations == 0
    out = [rep]
    if sec.exp_moment_b is not None or sec.martingale_b:
        ens = _ensemble(cfg)
        mart = ExperimentReport("exp-moment", inputs={"seed": ens.seed, "M": ens.grid.M, "n_paths": ens.n_paths,
                                                      "T": ens.grid.horizon, "mu": cfg.psi.mu,
                                                      "ensemble_digest": ens.digest()})
        if sec.exp_moment_b is not None:
            b = sec.exp_moment_b
            params = PsiParams(cfg.psi.mu, b, cfg.grid.T)
            params.require_supercritical()
            mc = constant_measure_change(ens, [b] + [0.0] * (ens.d - 1))
            est, se = exp_moment_estimate(ens, mc.kernel, cfg.psi.mu)
            bound = exp_moment_bound(params, 0.0)
            mart.add("exp_moment", est, se)
            mart.add("exp_moment_bound", bound)
            mart.rules["exp_moment_below_bound"] = est <= bound + cfg.tolerances.stderr_k * se
        for b in sec.martingale_b:
            mc = constant_measure_change(ens, [b] + [0.0] * (ens.d - 1))
            m, se = mean_and_stderr(mc.density(ens.grid.M))
            mart.add(f"density_mean[b={b:g}]", m, se)
            mart.rules[f"martingale_mean[b={b:g}]"] = abs(m - 1.0) <= cfg.tolerances.stderr_k * se
        out.append(mart)
    return out


def run_solve(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("solve")
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    problem = _problem(cfg, grid)
    basis = _basis(cfg.basis)
    kw = {"k_max": sec.picard_k_max, "tol": sec.picard_tol} if sec.scheme == "picard" else {}
    sol = solve(problem, ens, basis, sec.scheme, **kw)
    rep = ExperimentReport("solve", inputs={"seed": ens.seed, "M": grid.M, "n_paths": ens.n_paths, "T": grid.horizon,
                                            "basis": basis.describe(), "scheme": sec.scheme,
                                            "ensemble_digest": ens.digest()})
    rep.add("y0", sol.y0, sol.y0_stderr)
    rep.add("y0_pathwise_mean", sol.meta["y0_pathwise_mean"], sol.y0_stderr)
    rep.digests["solution"] = sol.digest()
    rep.details["solver_meta"] = {k: v for k, v in sol.meta.items() if k != "change_history"}
    if sec.oracle and problem.f.name in ("linear", "zero") and ens.d == 1:
        exact = closed_form_for(problem)
        fine_ens = refine(ens)
        fine = solve(BsdeProblem(fine_ens.grid, problem.f, problem.xi, problem.d), fine_ens, basis, sec.scheme, **kw)
        # first-order scheme: error(M) - error(2M) estimates half the dt term at M
        dt_term = 2.0 * abs(sol.y0 - fine.y0)
        rep.add("closed_form", exact)
        rep.add("y0_at_2M", fine.y0, fine.y0_stderr)
        rep.add("dt_term", dt_term)
        rep.add("richardson_y0", 2.0 * fine.y0 - sol.y0)
        rep.add("abs_error", abs(sol.y0 - exact))
        rep.rules["matches_closed_form"] = _within(sol.y0 - exact, exact, sol.y0_stderr, cfg.tolerances, dt_term)
        rep.digests["solution_2M"] = fine.digest()
    else:
        rep.informational = True
    return [rep]


def run_price(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("price")
    grid = _grid(cfg)
    problem = _problem(cfg, grid)
    params = _params(cfg, problem.f)
    params.require_supercritical()
    ens = _ensemble(cfg, grid)
    basis = _basis(cfg.basis)
    sol = solve(problem, ens, basis, "backward_euler")
    mc = build_measure_change(ens, problem.f, sol)
    adm = admissibility_check(problem.xi, params, sec.admissibility_paths, seed=cfg.ensemble.seed,
                              threshold=cfg.tolerances.admissibility_threshold, d=ens.d)
    price = measure_solution_price(problem.xi, ens, mc, adm, override=sec.override)
    adm.ess = price.ess
    combined = math.hypot(sol.y0_stderr, price.stderr)
    rep = ExperimentReport("price", inputs={"seed": ens.seed, "M": grid.M, "n_paths": ens.n_paths, "T": grid.horizon,
                                            "basis": basis.describe(), "ensemble_digest": ens.digest()})
    rep.add("solver_y0", sol.y0, sol.y0_stderr)
    rep.add("measure_price", price.value, price.stderr)
    rep.add("ess_fraction", price.ess_fraction)
    rep.add("difference", sol.y0 - price.value, combined)
    rep.rules["solver_matches_measure_price"] = _within(sol.y0 - price.value, price.value, combined, cfg.tolerances)
    if sec.check_bT:
        target = problem.f.b * grid.horizon if problem.f.affine_z[0] >= 0 else -problem.f.b * grid.horizon
        rep.add("bT", target)
        rep.rules["solver_y0_matches_bT"] = _within(sol.y0 - target, target, sol.y0_stderr, cfg.tolerances)
    rep.details["admissibility"] = adm.to_dict()
    rep.digests["solution"] = sol.digest()
    return [rep]


def run_admissibility(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("admissibility")
    b = 0.0
    if cfg.generator is not None:
        b = _generator(cfg.generator).b
    params = PsiParams(cfg.psi.mu, b, cfg.grid.T)
    xi = _terminal(cfg.terminal)
    adm = admissibility_check(xi, params, cfg.ensemble.n_paths, seed=cfg.ensemble.seed,
                              threshold=cfg.tolerances.admissibility_threshold, d=cfg.ensemble.d)
    rep = ExperimentReport("admissibility", inputs={"seed": cfg.ensemble.seed, "n_paths": cfg.ensemble.n_paths,
                                                    "mu": params.mu, "b": params.b, "T": params.horizon})
    rep.add(f"psi_moment@{adm.n}", adm.psi_moment_n)
    rep.add(f"psi_moment@{2 * adm.n}", adm.psi_moment_2n)
    rep.add(f"psi_moment@{4 * adm.n}", adm.psi_moment_4n)
    rep.add("relative_change", adm.relative_change)
    rep.add("bound_rhs", adm.bound_rhs)
    rep.rules["verdict_as_expected"] = adm.verdict == sec.expect
    rep.details["admissibility"] = adm.to_dict()
    return [rep]


def _error_model(m):
    return ErrorModel(m.C1, m.C2)


def run_uniqueness(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("uniqueness")
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    problem = _problem(cfg, grid)
    bases = [_basis(b) for b in sec.bases]
    tol = _error_model(cfg.tolerances.tol_unique)
    rep = uniqueness_experiment(problem, ens, bases, tol, tuple(sec.schemes))
    if sec.refine_check:
        fine = refine(ens)
        fine_problem = BsdeProblem(fine.grid, problem.f, problem.xi, problem.d)
        fine_rep = uniqueness_experiment(fine_problem, fine, bases, tol, tuple(sec.schemes), check_hypotheses=False)
        rep.add("U_at_2M", fine_rep.metric("U"))
        rep.rules["U_shrinks_when_M_doubles"] = fine_rep.metric("U") < rep.metric("U")
        rep.digests.update({f"2M:{k}": v for k, v in fine_rep.digests.items()})
        rep.series["pairs_2M"] = fine_rep.series["pairs"]
    return [rep]


def run_comparison(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.comparison
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    first = _problem(cfg, grid)
    second = _problem(cfg, grid, sec.generator, sec.terminal)
    tol = _error_model(cfg.tolerances.tol_cmp)
    rep = comparison_experiment(first, second, ens, tol, sec.mode, _basis(cfg.basis), probe_delta=sec.probe_delta)
    return [rep]


def run_stability(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.stability
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    f0 = _generator(cfg.generator)
    xi0 = _terminal(cfg.terminal)
    eta = _terminal(sec.eta)
    params = _params(cfg, f0)
    basis = _basis(cfg.basis)
    seq = StabilitySequence(f0, xi0, eta, n_list=tuple(sec.n_list), betas=tuple(sec.betas))
    rep = stability_experiment(seq, ens, params, cfg.tolerances.tol_stab, basis, mode=sec.mode,
                               admissibility_n=sec.admissibility_paths)
    out = [rep]
    if sec.trivial_coupling:
        triv = StabilitySequence.trivial(f0, xi0, eta, n_list=tuple(sec.n_list), betas=tuple(sec.betas))
        trep = stability_experiment(triv, ens, params, cfg.tolerances.tol_stab, basis, mode=sec.mode,
                                    admissibility_n=sec.admissibility_paths)
        trep.tag = "stability-trivial"
        trep.rules = {"all_metrics_exactly_zero": all(m.value == 0.0 for m in trep.metrics if m.name != "tol_stab")}
        out.append(trep)
    return out


def run_class_d(cfg: ExperimentConfig) -> list[ExperimentReport]:
    sec = cfg.section("class_d")
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    problem = _problem(cfg, grid)
    params = _params(cfg, problem.f)
    params.require_supercritical()
    sol = solve(problem, ens, _basis(cfg.basis), "backward_euler")
    mc = build_measure_change(ens, problem.f, sol)
    rep = class_d_diagnostic(ens, sol, StoppingTimeFamily.default(), params, sec.K_ladder, cfg.tolerances.eps_ui, mc)
    out = [rep]
    if sec.self_test:
        out.append(class_d_self_test(ens, params, sec.K_ladder, cfg.tolerances.eps_ui, seed=cfg.ensemble.seed))
    return out


def run_apriori(cfg: ExperimentConfig) -> list[ExperimentReport]:
    grid = _grid(cfg)
    ens = _ensemble(cfg, grid)
    problem = _problem(cfg, grid)
    params = _params(cfg, problem.f)
    params.require_supercritical()
    basis = _basis(cfg.basis)
    sol = solve(problem, ens, basis, "backward_euler")
    return [apriori_bound_experiment(problem, ens, sol, params, basis, cfg.tolerances.max_violation)]


RUNNERS = {
    "psi-check": run_psi_check,
    "solve": run_solve,
    "price": run_price,
    "admissibility": run_admissibility,
    "uniqueness": run_uniqueness,
    "comparison": run_comparison,
    "stability": run_stability,
    "class-d": run_class_d,
    "apriori": run_apriori,
}


def run_experiment(cfg: ExperimentConfig) -> list[ExperimentReport]:
    """Run one config; every report gets the resolved config and its hash."""
    reports = RUNNERS[cfg.kind](cfg)
    resolved, digest = cfg.resolved(), cfg.hash
    for rep in reports:
        rep.config = resolved
        rep.config_hash = digest
    return reports


def aborted_report(cfg: ExperimentConfig, exc: Exception) -> ExperimentReport:
    rep = ExperimentReport(cfg.kind, config=cfg.resolved(), config_hash=cfg.hash)
    rep.rules["hypotheses_hold"] = False
    rep.details["aborted"] = {"error": type(exc).__name__, "message": str(exc)}
    return rep

