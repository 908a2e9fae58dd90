"""Generators f(t, y, z), Osgood moduli, terminal values and assumption checkers.

Generators are vectorized: ``eval(t, y, z)`` takes a time (scalar, or an
array matching ``y`` inside the checkers), ``y`` of shape ``(n,)`` and ``z`` of shape ``(n, d)``, and returns
``(n,)``.  The declared constants are claims; the ``check_*`` functions sample for
counterexamples, they do not prove anything.

Built-in Osgood moduli and why ``int_0 du / rho(u)`` diverges:

* ``rho_linear{K}``: ``K u``; the integral is ``log`` divergent at 0.
* ``rho_log{K}``: ``K u (1 - ln u)`` on ``(0, 1]`` and ``K`` beyond; with
  ``v = 1 - ln u`` the integral near 0 becomes ``int dv / v``, divergent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, MissingConstant

Array = np.ndarray


@dataclass(frozen=True)
class OsgoodFunction:
    rho: Callable[[Array], Array]
    linear_growth_l: float
    name: str = "rho"
    params: dict = field(default_factory=dict)
    majorant: tuple | None = None  # (slope, intercept) with rho(u) <= slope u + intercept

    def __call__(self, u):
        return self.rho(np.asarray(u, dtype=float))

    def affine_majorant(self) -> tuple[float, float]:
        if self.majorant is not None:
            return self.majorant
        return self.linear_growth_l, self.linear_growth_l


def rho_linear(K: float = 1.0) -> OsgoodFunction:
    if K <= 0:
        raise DomainError("K must be positive")
    return OsgoodFunction(lambda u: K * u, K, "rho_linear", {"K": K}, (K, 0.0))


def rho_log(K: float = 1.0) -> OsgoodFunction:
    if K <= 0:
        raise DomainError("K must be positive")

    def rho(u):
        u = np.asarray(u, dtype=float)
        small = np.clip(u, 1e-300, 1.0)
        val = np.where(u >= 1.0, 1.0, small * (1.0 - np.log(small)))
        return K * np.where(u <= 0, 0.0, val)

    # u (1 - ln u) <= 1 on (0, 1], so rho <= K <= K (u + 1)
    return OsgoodFunction(rho, K, "rho_log", {"K": K}, (0.0, K))


@dataclass(frozen=True)
class GeneratorSpec:
    eval: Callable[[float, Array, Array], Array]
    b: float
    a: float | None = None
    r: float | None = None
    rho: OsgoodFunction | None = None
    affine_z: tuple | None = None  # coefficient row vector when f is affine in z
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, t, y, z):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :] if y.size == 1 else z[:, None]
        return np.asarray(self.eval(t, y, z), dtype=float)

    def shifted(self, constant: float) -> "GeneratorSpec":
        """f + constant; keeps every declared constant."""
        base = self.eval

        def ev(t, y, z):
            return base(t, y, z) + constant

        return GeneratorSpec(ev, self.b, self.a, self.r, self.rho, self.affine_z,
                             f"{self.name}+{constant!r}", dict(self.params, shift=constant))

    def at_zero(self, t: float) -> float:
        """f(t, 0, 0) for the deterministic generators used here."""
        return float(self.eval(t, np.zeros(1), np.zeros((1, 1)))[0])


def _z1(z):
    return z[:, 0]


def zero() -> GeneratorSpec:
    return GeneratorSpec(lambda t, y, z: np.zeros_like(y, dtype=float), b=0.0, a=0.0, r=0.0,
                         rho=rho_linear(1.0), affine_z=(0.0,), name="zero", params={})


def linear(a: float = 0.0, b: float = 0.0, c: float = 0.0) -> GeneratorSpec:
    """a y + b z_1 + c."""

    def ev(t, y, z):
        return a * y + b * _z1(z) + c

    return GeneratorSpec(ev, b=abs(b), a=abs(a), r=abs(a), rho=rho_linear(max(a, 1.0)),
                         affine_z=(b,), name="linear", params={"a": a, "b": b, "c": c})


def cubic_decay(b: float = 0.0) -> GeneratorSpec:
    """-y^3 + b z_1: one-sided Osgood with rho(u) = u, not Lipschitz in y, no linear growth."""

    def ev(t, y, z):
        return -(y * y * y) + b * _z1(z)

    return GeneratorSpec(ev, b=abs(b), rho=rho_linear(1.0), affine_z=(b,), name="cubic_decay", params={"b": b})


def osgood_log(K: float = 1.0) -> GeneratorSpec:
    """K sign(y) u(1 - ln u)|_{u=|y|}, no z dependence.

    Increasing in y with an infinite slope at 0, so only the one-sided Osgood
    bound holds; the modulus is ``rho_log(2K)`` because two opposite-sign
    arguments each contribute at most ``K phi(|y - y'| / 2)``.
    """
    base = rho_log(1.0)

    def ev(t, y, z):
        return K * np.sign(y) * base(np.abs(y))

    return GeneratorSpec(ev, b=0.0, rho=rho_log(2.0 * K), affine_z=(0.0,), name="osgood_log", params={"K": K})


def sine(a: float = 1.0, b: float = 0.0) -> GeneratorSpec:
    """a sin(y) + b z_1."""

    def ev(t, y, z):
        return a * np.sin(y) + b * _z1(z)

    return GeneratorSpec(ev, b=abs(b), a=abs(a), r=abs(a), rho=rho_linear(max(abs(a), 1.0)),
                         affine_z=(b,), name="sine", params={"a": a, "b": b})


def directional(beta: float, u) -> GeneratorSpec:
    """beta (z . u) for a unit vector u (multi-dimensional kernel example)."""
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)

    def ev(t, y, z):
        return beta * (z @ u)

    return GeneratorSpec(ev, b=abs(beta), a=0.0, r=0.0, rho=rho_linear(1.0),
                         affine_z=tuple(beta * u), name="directional", params={"beta": beta, "u": u.tolist()})


GENERATORS = {
    "zero": (zero, {}),
    "linear": (linear, {"a": 0.0, "b": 0.0, "c": 0.0}),
    "cubic_decay": (cubic_decay, {"b": 0.0}),
    "osgood_log": (osgood_log, {"K": 1.0}),
    "sine": (sine, {"a": 1.0, "b": 0.0}),
}

RHO = {
    "rho_linear": (rho_linear, {"K": 1.0}),
    "rho_log": (rho_log, {"K": 1.0}),
}


# ---------------------------------------------------------------- terminals


@dataclass(frozen=True)
class TerminalSpec:
    """A payoff computed from the whole path; ``xi(levels)`` with levels ``(n, M+1, d)``.

    ``gauss(m, s)``, when given, is the exact ``E[h(m + s G)]`` for a payoff
    ``h(W_T)`` of the first coordinate (G standard normal, ``s > 0``).
    """

    xi: Callable[[Array], Array]
    description: str
    params: dict = field(default_factory=dict)
    bound: float | None = None  # sup |xi| when known
    gauss: Callable[[Array, float], Array] | None = None

    def __call__(self, ens) -> Array:
        return np.asarray(self.xi(ens.levels()), dtype=float)

    def scaled(self, k: float) -> "TerminalSpec":
        base, g = self.xi, self.gauss
        bound = None if self.bound is None else abs(k) * self.bound
        gauss = None if g is None else (lambda m, s: k * g(m, s))
        return TerminalSpec(lambda W: k * base(W), f"{k!r}*{self.description}", dict(self.params, scale=k), bound, gauss)

    def plus(self, other: "TerminalSpec", k: float = 1.0) -> "TerminalSpec":
        """xi + k * other."""
        b1, b2, g1, g2 = self.xi, other.xi, self.gauss, other.gauss
        bound = None if self.bound is None or other.bound is None else self.bound + abs(k) * other.bound
        gauss = None if g1 is None or g2 is None else (lambda m, s: g1(m, s) + k * g2(m, s))
        return TerminalSpec(lambda W: b1(W) + k * b2(W), f"{self.description}+{k!r}*{other.description}",
                            dict(self.params, eta_scale=k), bound, gauss)


def _wt(W):
    return W[:, -1, 0]


def _gauss_abs_sin(m, s):
    # about 5 / s terms; the tail beyond is below e^{-42}
    # |sin x| = 2/pi - (4/pi) sum_k cos(2kx) / (4k^2 - 1) and E cos(2k(m + sG)) = cos(2km) e^{-2 k^2 s^2}
    m = np.asarray(m, dtype=float)
    kmax = int(math.ceil(4.6 / s)) + 1
    acc = np.zeros_like(m)
    for k in range(1, kmax + 1):
        acc += np.cos(2 * k * m) * (math.exp(-2.0 * k * k * s * s) / (4.0 * k * k - 1.0))
    return 2.0 / math.pi - 4.0 / math.pi * acc


def _gauss_abs(m, s):
    m = np.asarray(m, dtype=float)
    return s * math.sqrt(2.0 / math.pi) * np.exp(-0.5 * (m / s) ** 2) + m * (1.0 - 2.0 * ndtr(-m / s))


def _gauss_exp_clipped(m, s, kappa):
    m = np.asarray(m, dtype=float)
    below = np.exp(m + 0.5 * s * s) * ndtr((kappa - m - s * s) / s)
    return below + math.exp(kappa) * ndtr((m - kappa) / s)


def _gauss_exp_square(m, s):
    m = np.asarray(m, dtype=float)
    if 2.0 * s * s >= 1.0:
        return np.full_like(m, np.inf)
    v = 1.0 - 2.0 * s * s
    return np.exp(m * m / v) / math.sqrt(v)


def bounded_sin(scale: float = 1.0, shift: float = 0.0) -> TerminalSpec:
    return TerminalSpec(lambda W: scale * np.sin(_wt(W)) + shift, "bounded_sin",
                        {"scale": scale, "shift": shift}, abs(scale) + abs(shift),
                        lambda m, s: scale * np.sin(m) * math.exp(-0.5 * s * s) + shift)


def abs_sin(scale: float = 1.0) -> TerminalSpec:
    return TerminalSpec(lambda W: scale * np.abs(np.sin(_wt(W))), "abs_sin", {"scale": scale}, abs(scale),
                        lambda m, s: scale * _gauss_abs_sin(m, s))


def abs_WT() -> TerminalSpec:
    return TerminalSpec(lambda W: np.abs(_wt(W)), "abs_WT", {}, gauss=_gauss_abs)


def identity_WT(scale: float = 1.0) -> TerminalSpec:
    return TerminalSpec(lambda W: scale * _wt(W), "identity_WT", {"scale": scale},
                        gauss=lambda m, s: scale * np.asarray(m, dtype=float))


def exp_clipped(kappa: float = 2.0) -> TerminalSpec:
    return TerminalSpec(lambda W: np.exp(np.minimum(_wt(W), kappa)), "exp_clipped", {"kappa": kappa}, math.exp(kappa),
                        lambda m, s: _gauss_exp_clipped(m, s, kappa))


def exp_square() -> TerminalSpec:
    """exp(W_T^2): not even integrable once T >= 1/2."""
    return TerminalSpec(lambda W: np.exp(_wt(W) ** 2), "exp_square", {}, gauss=_gauss_exp_square)


def constant(c: float = 0.0) -> TerminalSpec:
    return TerminalSpec(lambda W: np.full(W.shape[0], float(c)), "constant", {"c": c}, abs(c),
                        lambda m, s: np.full(np.shape(m), float(c)))


TERMINALS = {
    "abs_WT": (abs_WT, {}),
    "abs_sin": (abs_sin, {"scale": 1.0}),
    "bounded_sin": (bounded_sin, {"scale": 1.0, "shift": 0.0}),
    "constant": (constant, {"c": 0.0}),
    "exp_clipped": (exp_clipped, {"kappa": 2.0}),
    "exp_square": (exp_square, {}),
    "identity_WT": (identity_WT, {"scale": 1.0}),
}


def _build(registry, kind, name, params):
    if name not in registry:
        raise KeyError(f"unknown {kind} {name!r}; known: {sorted(registry)}")
    factory, defaults = registry[name]
    unknown = set(params) - set(defaults)
    if unknown:
        raise KeyError(f"unknown parameters {sorted(unknown)} for {kind} {name!r}")
    return factory(**{**defaults, **params})


def make_generator(name: str, params: dict | None = None) -> GeneratorSpec:
    return _build(GENERATORS, "generator", name, params or {})


def make_terminal(name: str, params: dict | None = None) -> TerminalSpec:
    return _build(TERMINALS, "terminal", name, params or {})


def make_rho(name: str, params: dict | None = None) -> OsgoodFunction:
    return _build(RHO, "rho", name, params or {})


def catalog() -> dict:
    """Registry listing with parameter defaults, in stable order."""
    return {
        "generators": {k: dict(GENERATORS[k][1]) for k in sorted(GENERATORS)},
        "terminals": {k: dict(TERMINALS[k][1]) for k in sorted(TERMINALS)},
        "rho": {k: dict(RHO[k][1]) for k in sorted(RHO)},
    }


# ---------------------------------------------------------------- Girsanov kernel


def girsanov_kernel(f: GeneratorSpec, t: float, y, z) -> Array:
    """1_{|z| != 0} (f(t, y, z) - f(t, y, 0)) z / |z|^2, shape ``(n, d)``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    norm2 = np.einsum("nk,nk->n", z, z)
    if f.affine_z is not None:
        # exact difference; subtracting two evaluations cancels badly when |z| << |y|
        coef = np.zeros(z.shape[1])
        coef[:len(f.affine_z)] = f.affine_z  # a single entry acts on z_1
        num = z @ coef
    else:
        num = f.eval(t, y, z) - f.eval(t, y, np.zeros_like(z))
    nz = norm2 > 0
    scale = np.zeros_like(norm2)
    scale[nz] = num[nz] / norm2[nz]
    return scale[:, None] * z


# ---------------------------------------------------------------- checkers


@dataclass
class Sampler:
    """Random (t, y, y', z, z') batches on a box plus heavy-tailed and multiscale parts."""

    d: int = 1
    horizon: float = 1.0
    y_box: float = 10.0
    z_box: float = 10.0
    heavy_fraction: float = 0.1
    multiscale_fraction: float = 0.2
    seed: int = 0

    def draw(self, n: int) -> dict:
        g = np.random.default_rng(self.seed)
        t = g.uniform(0.0, self.horizon, n)
        y = g.uniform(-self.y_box, self.y_box, n)
        yp = g.uniform(-self.y_box, self.y_box, n)
        z = g.uniform(-self.z_box, self.z_box, (n, self.d))
        zp = g.uniform(-self.z_box, self.z_box, (n, self.d))
        n_heavy = int(self.heavy_fraction * n)
        if n_heavy:
            sl = slice(0, n_heavy)
            y[sl] = g.standard_cauchy(n_heavy)
            yp[sl] = g.standard_cauchy(n_heavy)
            z[sl] = g.standard_cauchy((n_heavy, self.d))
        n_ms = int(self.multiscale_fraction * n)
        if n_ms:
            sl = slice(n_heavy, n_heavy + n_ms)
            sign = g.choice([-1.0, 1.0], n_ms)
            y[sl] = sign * 10.0 ** g.uniform(-10, 1, n_ms)
            yp[sl] = y[sl] + g.choice([-1.0, 1.0], n_ms) * 10.0 ** g.uniform(-10, 0, n_ms)
            zp[sl] = z[sl] + g.normal(size=(n_ms, self.d)) * 10.0 ** g.uniform(-8, 0, (n_ms, 1))
        return {"t": t, "y": y, "yp": yp, "z": z, "zp": zp}

    def describe(self) -> dict:
        return {"y_box": self.y_box, "z_box": self.z_box, "heavy_fraction": self.heavy_fraction,
                "multiscale_fraction": self.multiscale_fraction, "seed": self.seed, "d": self.d}


@dataclass
class ViolationReport:
    check: str
    constant: float | None
    samples: int
    violations: list = field(default_factory=list)
    max_ratio: float = 0.0
    box: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"check": self.check, "constant": self.constant, "samples": self.samples,
                "violations": len(self.violations), "max_ratio": self.max_ratio,
                "passed": self.passed, "box": self.box}


def _evaluate(f, t, y, z):
    # t may be an array matching y; generators must broadcast over it
    return np.broadcast_to(np.asarray(f.eval(t, y, z), dtype=float), y.shape)


def _collect(check, constant, lhs, rhs, s, keys, box, tol, scale=0.0, limit=20):
    # scale: magnitude of the f values whose difference forms lhs (cancellation slack)
    bad = lhs > rhs + tol * (1.0 + np.abs(rhs) + scale)
    idx = np.flatnonzero(bad)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    rows = [{k: (s[k][i].tolist() if np.ndim(s[k][i]) else float(s[k][i])) for k in keys} for i in idx[:limit]]
    return ViolationReport(check, constant, lhs.size, rows if idx.size <= limit else rows + [{"more": int(idx.size - limit)}],
                           float(np.nanmax(ratio)) if ratio.size else 0.0, box)


def check_osgood_A1(f: GeneratorSpec, sampler: Sampler, n: int = 100_000, tol: float = 1e-10) -> ViolationReport:
    """sign(y - y') (f(t,y,z) - f(t,y',z)) <= rho(|y - y'|); exact ties are skipped."""
    if f.rho is None:
        raise MissingConstant("generator declares no Osgood modulus rho")
    s = sampler.draw(n)
    keep = s["y"] != s["yp"]
    s = {k: v[keep] for k, v in s.items()}
    f1 = _evaluate(f, s["t"], s["y"], s["z"])
    f2 = _evaluate(f, s["t"], s["yp"], s["z"])
    lhs = np.sign(s["y"] - s["yp"]) * (f1 - f2)
    rhs = f.rho(np.abs(s["y"] - s["yp"]))
    return _collect("A1", f.rho.params.get("K"), lhs, rhs, s, ("t", "y", "yp", "z"), sampler.describe(), tol,
                    np.abs(f1) + np.abs(f2))


def check_lipschitz_z_A2(f: GeneratorSpec, sampler: Sampler, n: int = 100_000, tol: float = 1e-10) -> ViolationReport:
    if f.b is None:
        raise MissingConstant("generator declares no z-Lipschitz constant b")
    s = sampler.draw(n)
    f1 = _evaluate(f, s["t"], s["y"], s["z"])
    f2 = _evaluate(f, s["t"], s["y"], s["zp"])
    rhs = f.b * np.linalg.norm(s["z"] - s["zp"], axis=1)
    return _collect("A2", f.b, np.abs(f1 - f2), rhs, s, ("t", "y", "z", "zp"), sampler.describe(), tol,
                    np.abs(f1) + np.abs(f2))


def check_linear_growth_A4(f: GeneratorSpec, sampler: Sampler, n: int = 100_000, tol: float = 1e-10) -> ViolationReport:
    if f.a is None:
        raise MissingConstant("generator declares no linear-growth constant a")
    s = sampler.draw(n)
    f1 = _evaluate(f, s["t"], s["y"], s["z"])
    f0 = _evaluate(f, s["t"], np.zeros_like(s["y"]), s["z"])
    rhs = f.a * np.abs(s["y"])
    return _collect("A4", f.a, np.abs(f1 - f0), rhs, s, ("t", "y", "z"), sampler.describe(), tol,
                    np.abs(f1) + np.abs(f0))


def check_lipschitz_y_A5(f: GeneratorSpec, sampler: Sampler, n: int = 100_000, tol: float = 1e-10) -> ViolationReport:
    if f.r is None:
        raise MissingConstant("generator declares no y-Lipschitz constant r")
    s = sampler.draw(n)
    f1 = _evaluate(f, s["t"], s["y"], s["z"])
    f2 = _evaluate(f, s["t"], s["yp"], s["z"])
    rhs = f.r * np.abs(s["y"] - s["yp"])
    return _collect("A5", f.r, np.abs(f1 - f2), rhs, s, ("t", "y", "yp", "z"), sampler.describe(), tol,
                    np.abs(f1) + np.abs(f2))


def check_continuity_A3(f: GeneratorSpec, sampler: Sampler, n: int = 20_000,
                        deltas=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)) -> list[tuple[float, float]]:
    """Empirical modulus of continuity of y -> f(t, y, z) on a shrinking delta ladder.

    Returns ``[(delta, sup |f(y + h) - f(y)|), ...]`` over ``|h| <= delta``;
    sampling restricted to the box so heavy tails do not dominate.
    """
    s = sampler.draw(n)
    y = np.clip(s["y"], -sampler.y_box, sampler.y_box)
    z = np.clip(s["z"], -sampler.z_box, sampler.z_box)
    g = np.random.default_rng(sampler.seed + 1)
    base = _evaluate(f, s["t"], y, z)
    table = []
    for delta in deltas:
        h = g.uniform(-delta, delta, y.shape[0])
        table.append((float(delta), float(np.max(np.abs(_evaluate(f, s["t"], y + h, z) - base)))))
    return table


def check_rho(rho: OsgoodFunction, n: int = 10_000, seed: int = 0, upper: float = 100.0, tol: float = 1e-12) -> dict:
    """rho(0) = 0, nondecreasing, midpoint-concave and rho(u) <= l (u + 1) on samples."""
    g = np.random.default_rng(seed)
    u = np.concatenate([10.0 ** g.uniform(-12, 0, n // 2), g.uniform(0, upper, n - n // 2)])
    v = np.concatenate([10.0 ** g.uniform(-12, 0, n // 2), g.uniform(0, upper, n - n // 2)])
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    ru, rv = rho(lo), rho(hi)
    mid = rho(0.5 * (lo + hi))
    return {
        "zero_at_zero": float(rho(np.array([0.0]))[0]) == 0.0,
        "nondecreasing": bool(np.all(rv >= ru - tol * (1 + np.abs(rv)))),
        "concave": bool(np.all(mid >= 0.5 * (ru + rv) - tol * (1 + np.abs(mid)))),
        "linear_growth": bool(np.all(rho(u) <= rho.linear_growth_l * (u + 1.0) + tol)),
    }
