"""The weight function psi(x, mu) = x * exp(mu * sqrt(2 log(1 + x))) and its inequalities.

All residual functions return ``rhs - lhs`` so that a valid inequality gives a
nonnegative number; callers compare against ``-tol * (1 + |rhs|)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SubcriticalError

DEFAULT_RTOL = 1e-12


@dataclass(frozen=True)
class PsiParams:
    mu: float
    b: float = 0.0
    horizon: float = 1.0
    is_supercritical: bool = field(init=False)

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError(f"mu must be positive, got {self.mu}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if not self.b >= 0:
            raise DomainError(f"b must be nonnegative, got {self.b}")
        object.__setattr__(self, "is_supercritical", self.mu > self.critical_mu)

    @property
    def critical_mu(self) -> float:
        return self.b * math.sqrt(self.horizon)

    def require_supercritical(self, remaining: float | None = None) -> None:
        """Raise :class:`SubcriticalError` unless mu > b * sqrt(remaining)."""
        tau = self.horizon if remaining is None else remaining
        if not self.mu > self.b * math.sqrt(tau):
            raise SubcriticalError(
                f"mu={self.mu} is not above the critical value b*sqrt(T)={self.b * math.sqrt(tau):.6g}"
            )


def _check_mu(mu):
    if np.any(np.asarray(mu) <= 0) or np.any(np.isnan(mu)):
        raise DomainError("mu must be positive")


def psi(x, mu):
    """psi(x, mu) for x >= 0, mu > 0; vectorized over numpy inputs."""
    x = np.asarray(x, dtype=float)
    _check_mu(mu)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("psi is defined for x >= 0 only")
    out = x * np.exp(mu * np.sqrt(2.0 * np.log1p(x)))
    return out if out.ndim else float(out)


def log_psi(x, mu):
    """log psi(x, mu); -inf at x = 0.  Used where psi itself would overflow."""
    x = np.asarray(x, dtype=float)
    _check_mu(mu)
    if np.any(x < 0):
        raise DomainError("psi is defined for x >= 0 only")
    with np.errstate(divide="ignore"):
        out = np.log(x) + mu * np.sqrt(2.0 * np.log1p(x))
    return out if out.ndim else float(out)


def product_inequality_residual(x, y, mu):
    """RHS - LHS of  e^x y <= e^{x^2 / (2 mu^2)} + e^{2 mu^2} psi(y, mu)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise DomainError("y must be nonnegative")
    _check_mu(mu)
    with np.errstate(over="ignore", invalid="ignore"):
        rhs = np.exp(x * x / (2.0 * mu * mu)) + np.exp(2.0 * mu * mu) * psi(y, mu)
        lhs = np.exp(x) * y
        res = rhs - lhs
    # both sides overflowed: decide in log space
    both_inf = np.isinf(rhs) & np.isinf(lhs)
    if np.any(both_inf):
        log_rhs = np.logaddexp(x * x / (2.0 * mu * mu), 2.0 * mu * mu + log_psi(y, mu))
        with np.errstate(divide="ignore"):
            log_lhs = x + np.log(y)
        res = np.where(both_inf, np.where(log_rhs >= log_lhs, np.inf, -np.inf), res)
    return res if np.ndim(res) else float(res)


def product_inequality_rhs(x, y, mu):
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(x) ** 2 / (2.0 * mu * mu)) + np.exp(2.0 * mu * mu) * psi(y, mu)


def exp_moment_bound(params: PsiParams, t: float = 0.0) -> float:
    """Upper bound (1 - b^2 (T - t) / mu^2)^(-1/2) on the conditional exponential moment."""
    if not 0.0 <= t <= params.horizon:
        raise DomainError(f"t={t} outside [0, {params.horizon}]")
    remaining = params.horizon - t
    params.require_supercritical(remaining)
    return (1.0 - params.b**2 * remaining / params.mu**2) ** -0.5


def psi_convexity_residual(x, y, lam, mu):
    """lam psi(x) + (1 - lam) psi(y) - psi(lam x + (1 - lam) y)."""
    lam = np.asarray(lam, dtype=float)
    if np.any((lam < 0) | (lam > 1)):
        raise DomainError("lambda must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rhs = lam * psi(x, mu) + (1.0 - lam) * psi(y, mu)
    res = rhs - psi(lam * x + (1.0 - lam) * y, mu)
    return res if np.ndim(res) else float(res)


def psi_scaling_residual(l, x, mu):
    """psi(l, mu) psi(x, mu) - psi(l x, mu) for l > 1, x >= 0."""
    l = np.asarray(l, dtype=float)
    if np.any(l <= 1):
        raise DomainError("l must exceed 1")
    res = psi(l, mu) * psi(x, mu) - psi(l * np.asarray(x, dtype=float), mu)
    return res if np.ndim(res) else float(res)


def psi_scaling_rhs(l, x, mu):
    return psi(l, mu) * psi(x, mu)


def psi_convexity_rhs(x, y, lam, mu):
    return lam * psi(x, mu) + (1.0 - lam) * psi(y, mu)


def within_tolerance(residual, rhs, rtol: float = DEFAULT_RTOL):
    """Boolean mask of residuals that satisfy ``residual >= -rtol * (1 + |rhs|)``."""
    with np.errstate(invalid="ignore"):
        return np.asarray(residual) >= -rtol * (1.0 + np.abs(rhs))


@dataclass
class InequalitySuiteResult:
    name: str
    samples: int
    violations: int
    min_scaled_residual: float


def run_inequality_suite(n: int = 100_000, seed: int = 0, rtol: float = DEFAULT_RTOL) -> list[InequalitySuiteResult]:
    """Randomized check of the product, convexity and scaling inequalities.

    Sampling boxes: x in [-10, 10], y in [0, 1e3], mu in [0.2, 5] for the
    product inequality; a log-uniform mix for the psi inequalities so tiny
    arguments are probed as well.
    """
    rng = np.random.default_rng(seed)
    out = []

    x = rng.uniform(-10, 10, n)
    y = rng.uniform(0, 1e3, n)
    y[: n // 4] = 10.0 ** rng.uniform(-12, 3, n // 4)
    mu = rng.uniform(0.2, 5.0, n)
    res = product_inequality_residual(x, y, mu)
    rhs = product_inequality_rhs(x, y, mu)
    out.append(_summarize("product", res, rhs, rtol))

    a = _mixed_nonneg(rng, n)
    b = _mixed_nonneg(rng, n)
    lam = rng.uniform(0, 1, n)
    mu = rng.uniform(0.2, 5.0, n)
    res = psi_convexity_residual(a, b, lam, mu)
    out.append(_summarize("convexity", res, psi_convexity_rhs(a, b, lam, mu), rtol))

    l = 1.0 + 10.0 ** rng.uniform(-6, 2, n)
    x = _mixed_nonneg(rng, n)
    mu = rng.uniform(0.2, 5.0, n)
    res = psi_scaling_residual(l, x, mu)
    out.append(_summarize("scaling", res, psi_scaling_rhs(l, x, mu), rtol))
    return out


def _mixed_nonneg(rng, n):
    v = rng.uniform(0, 100, n)
    k = n // 2
    v[:k] = 10.0 ** rng.uniform(-12, 2, k)
    v[k : k + n // 20] = 0.0
    return v


def _summarize(name, res, rhs, rtol):
    ok = within_tolerance(res, rhs, rtol)
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.asarray(res) / (1.0 + np.abs(rhs))
    finite = scaled[np.isfinite(scaled)]
    low = float(np.min(finite)) if finite.size else 0.0
    return InequalitySuiteResult(name, int(np.size(res)), int(np.size(res) - np.count_nonzero(ok)), low)
