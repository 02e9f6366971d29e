"""
Multi-agent constrained problems on a box.

Agent ``i`` (1-based) owns the scalar state ``x_i`` and a local objective
``f_i(x_i)``; all agents share ``m`` inequality constraints ``g_j(x) <= 0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expression, ExpressionLike

__all__ = [
    "BoxDomain",
    "Problem",
    "ProblemError",
    "project_box",
    "project_nonneg",
]


class ProblemError(ValueError):
    """Inconsistent problem definition or invalid argument."""


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ProblemError("lower and upper bounds must have the same length")
        if lo.size == 0:
            raise ProblemError("domain must have at least one dimension")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ProblemError("domain bounds must be finite")
        if np.any(lo > hi):
            bad = int(np.argmax(lo > hi)) + 1
            raise ProblemError(f"lower > upper on axis {bad}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, n: int, lo: float, hi: float) -> "BoxDomain":
        return cls(np.full(n, lo), np.full(n, hi))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def corners(self, axes: Sequence[int] | None = None) -> np.ndarray:
        """All corners of the sub-box spanned by ``axes`` (0-based); other coordinates at the centre."""
        axes = range(self.dim) if axes is None else list(axes)
        centre = 0.5 * (self.lower + self.upper)
        grids = np.meshgrid(*[[self.lower[a], self.upper[a]] for a in axes], indexing="ij")
        pts = np.tile(centre, (2 ** len(axes), 1))
        for a, g in zip(axes, grids):
            pts[:, a] = g.ravel()
        return pts


def project_box(domain: BoxDomain, x) -> np.ndarray:
    """Euclidean projection onto the box (componentwise clamping)."""
    return np.minimum(np.maximum(np.asarray(x, dtype=float), domain.lower), domain.upper)


def project_nonneg(v) -> np.ndarray:
    """Euclidean projection onto the non-negative orthant."""
    return np.maximum(np.asarray(v, dtype=float), 0.0)


@dataclass(frozen=True, eq=False)
class Problem:
    """``n`` agents, ``m`` constraints, local objectives and a box domain.

    Objectives and constraints may be given as expressions or as strings in
    the :func:`dpsaddle.expr.parse` grammar. Objective ``i`` may reference
    only ``x{i}``.
    """

    objectives: tuple
    constraints: tuple
    domain: BoxDomain
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        n = self.domain.dim
        objs = tuple(ex.as_expression(f, n) for f in self.objectives)
        cons = tuple(ex.as_expression(g, n) for g in self.constraints)
        if len(objs) != n:
            raise ProblemError(f"expected {n} objectives (one per agent), got {len(objs)}")
        if len(cons) < 1:
            raise ProblemError("at least one constraint is required")
        for i, f in enumerate(objs, start=1):
            other = sorted(v for v in ex.variables(f) if v != i)
            if other:
                names = ", ".join(f"x{v}" for v in other)
                raise ProblemError(f"objective {i} must depend only on x{i}, but references {names}")
        for j, g in enumerate(cons, start=1):
            bad = [v for v in ex.variables(g) if v > n]
            if bad:
                raise ProblemError(f"constraint {j} references x{max(bad)} beyond n={n}")
        object.__setattr__(self, "objectives", objs)
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", len(cons))

        dfs = tuple(ex.differentiate(f, i) for i, f in enumerate(objs, start=1))
        jac = tuple(tuple(row) for row in ex.jacobian(cons, n))
        object.__setattr__(self, "objective_derivatives", dfs)
        object.__setattr__(self, "jacobian_exprs", jac)
        flat = list(cons) + [e for row in jac for e in row] + list(dfs)
        object.__setattr__(self, "_kernel", ex.compile_functions(flat, n))

    @classmethod
    def from_strings(cls, objectives: Sequence[str], constraints: Sequence[str], lower, upper) -> "Problem":
        return cls(tuple(objectives), tuple(constraints), BoxDomain(lower, upper))

    # -- column access -------------------------------------------------

    def column_exprs(self, i: int) -> list[Expression]:
        """Symbolic ``dg/dx_i`` (length ``m``), ``i`` 1-based."""
        self._check_agent(i)
        return [row[i - 1] for row in self.jacobian_exprs]

    def _check_agent(self, i: int):
        if not 1 <= i <= self.n:
            raise ProblemError(f"agent index must be in 1..{self.n}, got {i}")

    def _point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n:
            raise ProblemError(f"expected a point of length {self.n}, got {x.size}")
        return x

    # -- evaluations -----------------------------------------------------

    def evaluate_all(self, xs):
        """Constraint values, Jacobian rows and objective derivatives.

        ``xs`` is a sequence of ``n`` floats (or equally shaped arrays).
        Returns ``(g, J, df)`` as lists: ``g[j]``, ``J[j][i]``, ``df[i]``.
        Entries that do not depend on the state come back as plain floats.
        """
        vals = self._kernel(xs)
        m, n = self.m, self.n
        g = list(vals[:m])
        flat = vals[m : m + m * n]
        jac = [list(flat[j * n : (j + 1) * n]) for j in range(m)]
        df = list(vals[m + m * n :])
        return g, jac, df

    def constraint_values(self, x) -> np.ndarray:
        """``g(x)`` as a length-``m`` array."""
        x = self._point(x)
        return np.array([ex.evaluate(g, x) for g in self.constraints])

    def constraint_jacobian(self, x) -> np.ndarray:
        """``dg/dx`` at ``x``, shape ``(m, n)``."""
        x = self._point(x)
        return np.array([[ex.evaluate(e, x) for e in row] for row in self.jacobian_exprs])

    def constraint_jacobian_column(self, i: int, x) -> np.ndarray:
        """``dg/dx_i`` at ``x``; ``i`` is 1-based."""
        x = self._point(x)
        return np.array([ex.evaluate(e, x) for e in self.column_exprs(i)])

    def objective_gradient(self, i: int, xi: float) -> float:
        """``f_i'(x_i)``."""
        self._check_agent(i)
        pt = np.zeros(self.n)
        pt[i - 1] = xi
        return ex.evaluate(self.objective_derivatives[i - 1], pt)

    def objective_value(self, x) -> float:
        x = self._point(x)
        return float(sum(ex.evaluate(f, x) for f in self.objectives))

    def lagrangian_value(self, x, mu) -> float:
        """``f(x) + mu . g(x)``; ``mu`` must be non-negative."""
        mu = np.asarray(mu, dtype=float).ravel()
        if mu.size != self.m:
            raise ProblemError(f"expected {self.m} multipliers, got {mu.size}")
        if np.any(mu < 0):
            raise ProblemError("multipliers must be non-negative")
        return self.objective_value(x) + float(mu @ self.constraint_values(x))

    def slater_check(self, x_bar) -> bool:
        """True iff ``x_bar`` lies in the domain and every constraint is strictly negative there."""
        x_bar = self._point(x_bar)
        if not self.domain.contains(x_bar):
            return False
        return bool(np.all(self.constraint_values(x_bar) < 0))

    def convexity_spot_check(self, n_pairs: int = 200, seed: int = 0, tol: float = 1e-9, warn: bool = True):
        """Randomised midpoint-convexity test of every objective and constraint.

        Returns a list of ``(name, a, b)`` violations. Each violation is also
        reported through :func:`warnings.warn` unless ``warn`` is false.
        """
        rng = np.random.default_rng(seed)
        lo, hi = self.domain.lower, self.domain.upper
        a = rng.uniform(lo, hi, size=(n_pairs, self.n))
        b = rng.uniform(lo, hi, size=(n_pairs, self.n))
        mid = 0.5 * (a + b)
        named = [(f"f{i}", f) for i, f in enumerate(self.objectives, 1)]
        named += [(f"g{j}", g) for j, g in enumerate(self.constraints, 1)]
        exprs = [e for _, e in named]
        va, vb, vm = (ex.evaluate_many(exprs, p) for p in (a, b, mid))
        bad = vm > 0.5 * (va + vb) + tol * (1.0 + np.abs(va) + np.abs(vb))
        failures = []
        for c, (name, _) in enumerate(named):
            rows = np.flatnonzero(bad[:, c])
            if rows.size:
                r = rows[0]
                failures.append((name, a[r], b[r]))
                if warn:
                    warnings.warn(f"{name} failed a midpoint convexity check", RuntimeWarning, stacklevel=2)
        return failures
