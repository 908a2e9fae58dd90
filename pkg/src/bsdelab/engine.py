"""Brownian ensembles on a time grid, Ito sums and stochastic exponentials.

Ensembles store increments ``dW[path, step, dim]``; levels are derived on
demand.  Densities are kept in log space and exponentiated late.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import BoundViolation, DimensionMismatch, DomainError, ResourceBudgetError

# float64 elements; overridable through the environment
DEFAULT_MEMORY_BUDGET = int(os.environ.get("BSDELAB_MAX_ELEMENTS", 400_000_000))

BOUND_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise DomainError("a time grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise DomainError("first node must be 0")
        dt = np.diff(nodes)
        if np.any(dt <= 1e-12 * nodes[-1]):
            raise DomainError("nodes must be strictly increasing with spacing above 1e-12 * T")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if horizon <= 0 or steps < 1:
            raise DomainError("need horizon > 0 and steps >= 1")
        nodes = np.linspace(0.0, horizon, steps + 1)
        nodes[-1] = horizon
        return cls(nodes)

    @property
    def M(self) -> int:
        return self.nodes.size - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def node_at(self, t: float) -> int:
        """Index of the grid node closest to time ``t``."""
        return int(np.argmin(np.abs(self.nodes - t)))

    def refined(self) -> "TimeGrid":
        mid = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        out = np.empty(2 * self.M + 1)
        out[0::2] = self.nodes
        out[1::2] = mid
        return TimeGrid(out)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    grid: TimeGrid
    increments: np.ndarray  # (n_paths, M, d)
    seed: int
    tag: str = "P"
    refinements: int = 0
    _levels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        inc = self.increments
        if inc.ndim != 3 or inc.shape[1] != self.grid.M:
            raise DimensionMismatch(f"increments shape {inc.shape} does not match grid with M={self.grid.M}")
        inc.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def levels(self) -> np.ndarray:
        """Brownian levels ``W[path, node, dim]`` with ``W[:, 0] = 0``."""
        if not self._levels:
            W = np.zeros((self.n_paths, self.grid.M + 1, self.d))
            np.cumsum(self.increments, axis=1, out=W[:, 1:, :])
            W.setflags(write=False)
            self._levels.append(W)
        return self._levels[0]

    def terminal(self) -> np.ndarray:
        return self.levels()[:, -1, :]

    def subset(self, count: int) -> "BrownianEnsemble":
        """The first ``count`` paths (identical to simulating ``count`` paths)."""
        return BrownianEnsemble(self.grid, self.increments[:count], self.seed, self.tag, self.refinements)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.grid.nodes.tobytes())
        h.update(np.ascontiguousarray(self.increments).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        """Write ``path, step, dim, increment`` rows."""
        n, M, d = self.increments.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "dim", "increment"])
            for p in range(n):
                for i in range(M):
                    for k in range(d):
                        w.writerow([p, i, k, repr(float(self.increments[p, i, k]))])

    def to_npz(self, path) -> None:
        np.savez(path, nodes=self.grid.nodes, increments=self.increments, seed=self.seed)


def simulate_brownian(
    grid: TimeGrid,
    d: int,
    n_paths: int,
    seed: int,
    memory_budget: int | None = None,
    first_path: int = 0,
) -> BrownianEnsemble:
    """Gaussian increments with variance ``dt_i`` per step, keyed by (seed, path, step, dim)."""
    if n_paths < 1 or d < 1:
        raise DomainError("need n_paths >= 1 and d >= 1")
    budget = DEFAULT_MEMORY_BUDGET if memory_budget is None else memory_budget
    elements = n_paths * grid.M * d
    if elements > budget:
        raise ResourceBudgetError(f"{elements} increments exceed the budget of {budget}")
    paths = np.arange(first_path, first_path + n_paths, dtype=np.uint64)
    z = rng.normals(seed, paths, grid.M, d, rng.STREAM_INCREMENTS)
    z *= np.sqrt(grid.dt)[None, :, None]
    return BrownianEnsemble(grid, z, seed)


def refine(ens: BrownianEnsemble) -> BrownianEnsemble:
    """Halve every step by a Brownian-bridge split; W at the original nodes is preserved."""
    grid = ens.grid
    fine = grid.refined()
    h = grid.dt[None, :, None]
    h1 = np.diff(fine.nodes)[0::2][None, :, None]
    h2 = h - h1
    stream = rng.STREAM_BRIDGE + ens.refinements
    g = rng.normals(ens.seed, np.arange(ens.n_paths, dtype=np.uint64), grid.M, ens.d, stream)
    first = ens.increments * (h1 / h) + np.sqrt(h1 * h2 / h) * g
    second = ens.increments - first
    inc = np.empty((ens.n_paths, 2 * grid.M, ens.d))
    inc[:, 0::2, :] = first
    inc[:, 1::2, :] = second
    return BrownianEnsemble(fine, inc, ens.seed, ens.tag, ens.refinements + 1)


class AdaptedProcess:
    """Values ``phi[path, step, dim]`` used against the increment of the same step.

    Construct through :meth:`from_rule` (the rule at step ``i`` only sees levels
    up to node ``i``), :meth:`constant`, or :meth:`from_array` for arrays that
    are predictable by their own construction (solver output).
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise DimensionMismatch("adapted process values must have shape (n_paths, M, d)")
        self.values = values

    @classmethod
    def from_array(cls, values) -> "AdaptedProcess":
        return cls(values)

    @classmethod
    def constant(cls, ens: BrownianEnsemble, c) -> "AdaptedProcess":
        c = np.broadcast_to(np.asarray(c, dtype=float), (ens.d,))
        return cls(np.broadcast_to(c, (ens.n_paths, ens.grid.M, ens.d)).copy())

    @classmethod
    def from_rule(cls, ens: BrownianEnsemble, rule: Callable[[int, float, np.ndarray], np.ndarray]) -> "AdaptedProcess":
        """``rule(i, t_i, history)`` with ``history = W[:, :i + 1, :]`` returns ``(n, d)`` values."""
        W = ens.levels()
        out = np.empty_like(ens.increments)
        for i in range(ens.grid.M):
            out[:, i, :] = rule(i, float(ens.grid.nodes[i]), W[:, : i + 1, :])
        return cls(out)

    def check_shape(self, ens: BrownianEnsemble) -> None:
        if self.values.shape != ens.increments.shape:
            raise DimensionMismatch(f"process shape {self.values.shape} vs increments {ens.increments.shape}")

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=2))) if self.values.size else 0.0


def ito_integral(ens: BrownianEnsemble, phi: AdaptedProcess, up_to: int | None = None) -> np.ndarray:
    """Left-point sum  sum_{i < up_to} phi_i . dW_i  per path."""
    phi.check_shape(ens)
    up_to = ens.grid.M if up_to is None else up_to
    if not 0 <= up_to <= ens.grid.M:
        raise DomainError(f"up_to={up_to} outside [0, {ens.grid.M}]")
    terms = np.einsum("nik,nik->ni", phi.values[:, :up_to], ens.increments[:, :up_to])
    return _rowwise_sum(terms)


def ito_integral_path(ens: BrownianEnsemble, phi: AdaptedProcess) -> np.ndarray:
    """Running integral at every node, shape ``(n, M + 1)``."""
    phi.check_shape(ens)
    terms = np.einsum("nik,nik->ni", phi.values, ens.increments)
    out = np.zeros((ens.n_paths, ens.grid.M + 1))
    np.cumsum(terms, axis=1, out=out[:, 1:])
    return out


def _rowwise_sum(a: np.ndarray) -> np.ndarray:
    if a.shape[1] == 0:
        return np.zeros(a.shape[0])
    return np.ascontiguousarray(a).sum(axis=1)


@dataclass(frozen=True, eq=False)
class DensityPath:
    log_density: np.ndarray  # (n, M + 1)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def at(self, node: int) -> np.ndarray:
        return np.exp(self.log_density[:, node])


def stochastic_exponential(ens: BrownianEnsemble, phi: AdaptedProcess, bound: float | None = None) -> DensityPath:
    """Discrete E(phi . W): exp(sum phi dW - 1/2 sum |phi|^2 dt) at every node."""
    phi.check_shape(ens)
    if bound is not None:
        worst = phi.max_norm()
        if worst > bound * (1.0 + BOUND_TOL) + BOUND_TOL:
            raise BoundViolation(f"kernel norm {worst:.6g} exceeds declared bound {bound}")
    stoch = np.einsum("nik,nik->ni", phi.values, ens.increments)
    drift = 0.5 * np.einsum("nik,nik->ni", phi.values, phi.values) * ens.grid.dt[None, :]
    log_d = np.zeros((ens.n_paths, ens.grid.M + 1))
    np.cumsum(stoch - drift, axis=1, out=log_d[:, 1:])
    return DensityPath(log_d)


def mean_and_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = x.size
    m = float(x.sum() / n)
    if n < 2:
        return m, math.inf
    var = float(((x - m) ** 2).sum() / (n - 1))
    return m, math.sqrt(var / n)
