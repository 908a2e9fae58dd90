"""Acceptance suite: the eleven criteria at full size (M=50, n=1e5).

Each test runs the shipped configs in ``configs/`` and records one
PASS/FAIL line, printed together at the end of the pytest session.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import functools
import math
import time
from pathlib import Path

import pytest

from bsdelab.config import load_config
from bsdelab.psi import run_inequality_suite
from bsdelab.runner import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS: dict[int, tuple[bool, str]] = {}

pytestmark = pytest.mark.acceptance


@functools.lru_cache(maxsize=None)
def run(name):
    cfg = load_config(CONFIGS / f"{name}.json")
    t0 = time.perf_counter()
    reports = run_experiment(cfg)
    return {r.tag: r for r in reports}, time.perf_counter() - t0


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def failed_rules(rep):
    return [k for k, v in rep.rules.items() if not v]


def test_c01_psi_inequalities():
    t0 = time.perf_counter()
    res = run_inequality_suite(100_000, seed=load_config(CONFIGS / "psi_check.json").ensemble.seed)
    elapsed = time.perf_counter() - t0
    bad = {r.name: r.violations for r in res if r.violations}
    ok = not bad and len(res) == 3 and all(r.samples == 100_000 for r in res) and elapsed < 10.0
    record(1, ok, f"violations={bad or 0} min_scaled_residual={min(r.min_scaled_residual for r in res):.3g} "
                  f"time={elapsed:.1f}s")


def test_c02_exponential_moment():
    reps, elapsed = run("psi_check")
    m = reps["exp-moment"]
    est, se = m.metric("exp_moment"), m.stderr("exp_moment")
    bound = 1.0 / math.sqrt(1.0 - 0.25)
    assert abs(m.metric("exp_moment_bound") - bound) < 1e-12
    ok = est <= 1.1547 + 3 * se and elapsed < 30.0
    record(2, ok, f"E={est:.5f}+-{se:.5f} bound=1.1547 time={elapsed:.1f}s")


def test_c03_martingale_mean():
    m = run("psi_check")[0]["exp-moment"]
    parts, ok = [], True
    for b in (0.25, 0.5):
        v, se = m.metric(f"density_mean[b={b:g}]"), m.stderr(f"density_mean[b={b:g}]")
        ok &= abs(v - 1.0) <= 3 * se
        parts.append(f"b={b:g}: {v:.5f}+-{se:.5f}")
    record(3, ok, "; ".join(parts))


def test_c04_solver_oracles():
    parts, ok = [], True
    for name in ("solve_ode", "solve_sin", "solve_exp_clipped"):
        reps, elapsed = run(name)
        rep = reps["solve"]
        exact, y0 = rep.metric("closed_form"), rep.metric("y0")
        tol = max(0.01 * abs(exact), 3 * rep.stderr("y0") + rep.metric("dt_term"))
        good = abs(y0 - exact) <= tol and rep.rules["matches_closed_form"] and elapsed < 120.0
        ok &= good
        parts.append(f"{name}: Y0={y0:.5f} exact={exact:.5f} tol={tol:.2g} {elapsed:.0f}s")
    ode = run("solve_ode")[0]["solve"]
    ok &= abs(ode.metric("closed_form") - (math.e - 1.0)) < 1e-9
    record(4, ok, "; ".join(parts))


def test_c05_girsanov_consistency():
    parts, ok = [], True
    for name in ("price_identity", "price_sin", "price_exp_clipped"):
        rep = run(name)[0]["price"]
        y0, price = rep.metric("solver_y0"), rep.metric("measure_price")
        comb = math.hypot(rep.stderr("solver_y0"), rep.stderr("measure_price"))
        good = abs(y0 - price) <= max(0.01 * abs(price), 3 * comb)
        if name == "price_identity":
            good &= abs(y0 - 0.5) <= max(0.01 * 0.5, 3 * rep.stderr("solver_y0"))
        ok &= good and rep.verdict == "PASS"
        parts.append(f"{name}: Y0={y0:.5f} Q={price:.5f} ess={rep.metric('ess_fraction'):.2f}")
    record(5, ok, "; ".join(parts))


def test_c06_uniqueness():
    rep = run("uniqueness_cubic")[0]["uniqueness"]
    U, tol, U2 = rep.metric("U"), rep.metric("tol_unique"), rep.metric("U_at_2M")
    ok = U <= tol and U2 < U
    record(6, ok, f"U={U:.5f} tol_unique={tol:.5f} U(2M)={U2:.5f}")


def test_c07_apriori():
    parts, ok = [], True
    for name in ("apriori_constant", "apriori_sin", "apriori_sin5"):
        rep = run(name)[0]["apriori"]
        frac = rep.metric("violation_fraction")
        ok &= frac <= 0.01 and "reg_tol_max" in {m.name for m in rep.metrics}
        parts.append(f"{name}: viol={frac:.4f} reg_tol={rep.metric('reg_tol_max'):.3g}")
    record(7, ok, "; ".join(parts))


def test_c08_comparison():
    parts, ok = [], True
    for name in ("comparison_terminal", "comparison_generator"):
        rep = run(name)[0]["comparison"]
        V, tol = rep.metric("V"), rep.metric("tol_cmp")
        ok &= V <= tol
        parts.append(f"{name}: V={V:.2e} tol={tol:.2e}")
    same = run("comparison_identical")[0]["comparison"]
    ok &= same.metric("V") == 0.0
    parts.append(f"identical: V={same.metric('V')!r}")
    record(8, ok, "; ".join(parts))


def test_c09_stability():
    reps = run("stability")[0]
    rep, triv = reps["stability"], reps["stability-trivial"]
    n_last = load_config(CONFIGS / "stability.json").stability.n_list[-1]
    S1 = rep.metric(f"S1@n={n_last}")
    ok = rep.verdict == "PASS" and S1 <= rep.metric("tol_stab") and triv.verdict == "PASS"
    mono = {k: v for k, v in rep.rules.items() if k.endswith("_nonincreasing")}
    record(9, ok, f"S1(n={n_last})={S1:.2e} tol_stab={rep.metric('tol_stab'):.2e} "
                  f"monotone={all(mono.values())} trivial_zero={triv.verdict == 'PASS'} failed={failed_rules(rep)}")


def test_c10_class_d():
    reps = run("class_d")[0]
    rep, selftest = reps["class-d"], reps["class-d-self-test"]
    cfg = load_config(CONFIGS / "class_d.json")
    tails = [rep.metric(f"tail@K={K:g}") for K in cfg.section("class_d").K_ladder]
    mono = all(b <= a for a, b in zip(tails, tails[1:]))
    final = rep.metric("final_tail")
    ok = mono and final < cfg.tolerances.eps_ui and selftest.details["diagnostic_verdict"] == "FAIL"
    record(10, ok, f"tails nonincreasing={mono} final_tail={final:.2e} eps_ui={cfg.tolerances.eps_ui:g} "
                   f"self_test={selftest.details['diagnostic_verdict']}")


def test_c11_determinism():
    names = sorted(p.stem for p in CONFIGS.glob("*.json") if p.stem not in ("calibration", "price_subcritical"))
    mismatched = []
    for name in names:
        first, _ = run(name)
        cfg = load_config(CONFIGS / f"{name}.json")
        again = {r.tag: r for r in run_experiment(cfg)}
        assert load_config(CONFIGS / f"{name}.json").hash == cfg.hash
        for tag, rep in first.items():
            if rep.metrics_bytes() != again[tag].metrics_bytes():
                mismatched.append(f"{name}:{tag}")
    record(11, not mismatched, f"{len(names)} configs re-run, mismatched={mismatched or 'none'}")
