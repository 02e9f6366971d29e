"""
Gaussian-mechanism calibration and noise generation.

The cloud releases two kinds of quantities: the partial-derivative columns
``dg/dx_i`` (one mechanism per agent) and the constraint values ``g`` used to
update the multipliers. Each release gets zero-mean Gaussian noise with a
standard deviation of ``kappa(delta, eps) * K * B``, where ``K`` is the
Lipschitz constant of the released map over the domain and ``B`` the largest
adjacency bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from . import expr as ex
from .expr import Expression
from .problem import BoxDomain, Problem

__all__ = [
    "PrivacyParams",
    "NoiseCalibration",
    "GaussianMechanism",
    "PrivacyError",
    "q_function",
    "q_inverse",
    "kappa",
    "calibrate_sigma",
    "calibrate",
    "estimate_lipschitz",
    "lipschitz_table",
    "substream",
    "adjacency_check",
]


class PrivacyError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy level ``(epsilon, delta)`` and per-agent adjacency bounds ``b``."""

    epsilon: float
    delta: float
    b: np.ndarray

    def __post_init__(self):
        if not self.epsilon > 0:
            raise PrivacyError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must be in (0, 1), got {self.delta}")
        b = np.array(self.b, dtype=float).ravel()
        if b.size == 0 or np.any(b < 0) or not np.all(np.isfinite(b)):
            raise PrivacyError("b must be a non-empty vector of finite non-negative bounds")
        b.flags.writeable = False
        object.__setattr__(self, "b", b)

    @property
    def B(self) -> float:
        return float(self.b.max())


@dataclass(frozen=True)
class NoiseCalibration:
    """Standard deviations of every mechanism.

    ``sigma_partial[i-1]`` is the std of the noise added to ``dg/dx_i`` and
    ``sigma_g`` the std of the noise added to ``g``.
    """

    sigma_partial: np.ndarray
    sigma_g: float
    kappa_value: float = float("nan")
    lipschitz_partial: np.ndarray | None = None
    lipschitz_g: float | None = None

    def __post_init__(self):
        s = np.array(self.sigma_partial, dtype=float).ravel()
        if np.any(s < 0) or self.sigma_g < 0:
            raise PrivacyError("standard deviations must be non-negative")
        s.flags.writeable = False
        object.__setattr__(self, "sigma_partial", s)
        object.__setattr__(self, "sigma_g", float(self.sigma_g))

    @classmethod
    def zero(cls, n: int) -> "NoiseCalibration":
        return cls(np.zeros(n), 0.0, 0.0)

    @property
    def variances(self) -> np.ndarray:
        return self.sigma_partial**2

    @property
    def is_noiseless(self) -> bool:
        return self.sigma_g == 0 and not np.any(self.sigma_partial)


# ---------------------------------------------------------------------------
# Calibration constants


def q_function(x: float) -> float:
    """Upper tail probability of the standard normal distribution."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def q_inverse(delta: float) -> float:
    """Solve ``q_function(K) == delta`` by bracketed root finding."""
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    lo, hi = -1.0, 1.0
    while q_function(lo) < delta:
        lo *= 2.0
    while q_function(hi) > delta:
        hi *= 2.0
    return brentq(lambda t: q_function(t) - delta, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def kappa(delta: float, epsilon: float) -> float:
    """Gaussian-mechanism constant ``(K + sqrt(K^2 + 2 eps)) / (2 eps)`` with ``K = Q^-1(delta)``."""
    if not epsilon > 0:
        raise PrivacyError(f"epsilon must be positive, got {epsilon}")
    k = q_inverse(delta)
    return (k + math.sqrt(k * k + 2.0 * epsilon)) / (2.0 * epsilon)


def calibrate_sigma(K: float, pp: PrivacyParams) -> float:
    """Smallest compliant standard deviation for a map with Lipschitz constant ``K``."""
    if K < 0:
        raise PrivacyError(f"Lipschitz constant must be non-negative, got {K}")
    return kappa(pp.delta, pp.epsilon) * K * pp.B


def calibrate(
    lipschitz_partial: Sequence[float],
    lipschitz_g: float,
    pp: PrivacyParams,
    sigma_partial: Sequence[float] | None = None,
    sigma_g: float | None = None,
) -> NoiseCalibration:
    """Noise levels for every mechanism.

    Explicit ``sigma_partial`` / ``sigma_g`` may raise the noise above the
    minimal level; values below it are rejected.
    """
    kap = kappa(pp.delta, pp.epsilon)
    kp = np.asarray(lipschitz_partial, dtype=float)
    floor_p = np.array([calibrate_sigma(k, pp) for k in kp])
    floor_g = calibrate_sigma(lipschitz_g, pp)
    sp = floor_p if sigma_partial is None else np.asarray(sigma_partial, dtype=float)
    sg = floor_g if sigma_g is None else float(sigma_g)
    if sp.shape != floor_p.shape:
        raise PrivacyError(f"expected {floor_p.size} partial standard deviations, got {sp.size}")
    # tiny slack so a value copied from a printed calibration is accepted
    slack = 1e-12
    low = np.flatnonzero(sp < floor_p * (1 - slack))
    if low.size:
        i = low[0]
        raise PrivacyError(f"sigma for agent {i + 1} ({sp[i]}) is below the privacy floor {floor_p[i]}")
    if sg < floor_g * (1 - slack):
        raise PrivacyError(f"sigma_g ({sg}) is below the privacy floor {floor_g}")
    return NoiseCalibration(sp, sg, kap, kp.copy(), float(lipschitz_g))


# ---------------------------------------------------------------------------
# Lipschitz constants


def _nested_resolution(r: int, d: int, max_points: int) -> int:
    """Largest point count per axis, with spacing a multiple of the fine spacing, fitting the budget."""
    for step in range(1, r):
        if (r - 1) % step:
            continue
        c = (r - 1) // step + 1
        if c**d <= max_points:
            return c
    return 2


def _spectral_norms(mats: np.ndarray) -> np.ndarray:
    m, n = mats.shape[-2:]
    gram = mats @ np.swapaxes(mats, -1, -2) if m <= n else np.swapaxes(mats, -1, -2) @ mats
    lam = np.linalg.eigvalsh(gram)[..., -1]
    return np.sqrt(np.maximum(lam, 0.0))


def estimate_lipschitz(
    functions: Sequence[Expression],
    domain: BoxDomain,
    grid_points_per_axis: int = 201,
    max_points: int = 2**20,
    return_argmax: bool = False,
):
    """Largest spectral norm of the Jacobian of ``functions`` over a grid on ``domain``.

    Only the variables the Jacobian entries depend on are sampled; all other
    coordinates are irrelevant. The grid has ``grid_points_per_axis`` points
    per sampled axis and always contains the corners of that sub-box.

    When the full tensor grid exceeds ``max_points`` the search runs on the
    coarsest-but-budget-fitting subgrid (nested in the full grid, corners
    included) and then refines the best candidates by coordinate-wise sweeps
    along the full-resolution grid lines.
    """
    if grid_points_per_axis < 2:
        raise PrivacyError("grid_points_per_axis must be at least 2")
    functions = list(functions)
    n = domain.dim
    jac = ex.jacobian(functions, n)
    flat = [e for row in jac for e in row]
    axes = sorted(set().union(*(ex.variables(e) for e in flat))) if flat else []
    axes = [a - 1 for a in axes]
    fn = ex.compile_functions(flat, n)
    rows, cols = len(functions), n
    centre = 0.5 * (domain.lower + domain.upper)

    def norms_at(points: np.ndarray) -> np.ndarray:
        cols_in = [points[:, a] for a in range(n)]
        vals = fn(cols_in)
        J = np.empty((points.shape[0], rows, cols))
        for idx, v in enumerate(vals):
            J[:, idx // cols, idx % cols] = v
        return _spectral_norms(J)

    if not axes or rows == 0:
        val = float(norms_at(centre[None, :])[0]) if rows else 0.0
        return (val, centre) if return_argmax else val

    r = grid_points_per_axis
    fine = [np.linspace(domain.lower[a], domain.upper[a], r) for a in axes]
    d = len(axes)
    c = r if r**d <= max_points else _nested_resolution(r, d, max_points)
    step = (r - 1) // (c - 1)
    coarse_idx = np.arange(0, r, step)

    def points_from(index_sets: np.ndarray) -> np.ndarray:
        pts = np.tile(centre, (index_sets.shape[0], 1))
        for k, a in enumerate(axes):
            pts[:, a] = fine[k][index_sets[:, k]]
        return pts

    grid = np.stack(np.meshgrid(*([coarse_idx] * d), indexing="ij"), axis=-1).reshape(-1, d)
    best_val = -1.0
    best_idx = None
    vals_all = []
    for start in range(0, grid.shape[0], 1 << 16):
        chunk = grid[start : start + (1 << 16)]
        v = norms_at(points_from(chunk))
        vals_all.append(v)
        j = int(np.argmax(v))
        if v[j] > best_val:
            best_val, best_idx = float(v[j]), chunk[j].copy()

    if c < r:
        vals_all = np.concatenate(vals_all)
        top = np.argsort(vals_all)[-8:]
        for t in top:
            cur = grid[t].copy()
            cur_val = float(vals_all[t])
            improved = True
            while improved:
                improved = False
                for k in range(d):
                    line = np.tile(cur, (r, 1))
                    line[:, k] = np.arange(r)
                    v = norms_at(points_from(line))
                    j = int(np.argmax(v))
                    if v[j] > cur_val:
                        cur, cur_val, improved = line[j].copy(), float(v[j]), True
            if cur_val > best_val:
                best_val, best_idx = cur_val, cur

    if return_argmax:
        return best_val, points_from(best_idx[None, :])[0]
    return best_val


def lipschitz_table(problem: Problem, grid_points_per_axis: int = 201, max_points: int = 2**20):
    """Lipschitz constants of every column ``dg/dx_i`` and of ``g`` itself.

    Returns ``(partials, K_g)`` where ``partials[i-1]`` belongs to agent ``i``.
    """
    partials = np.array(
        [
            estimate_lipschitz(problem.column_exprs(i), problem.domain, grid_points_per_axis, max_points)
            for i in range(1, problem.n + 1)
        ]
    )
    kg = estimate_lipschitz(problem.constraints, problem.domain, grid_points_per_axis, max_points)
    return partials, kg


# ---------------------------------------------------------------------------
# Noise generation

_STREAM_TAGS = {"partial": 0, "g": 1}


def substream(seed: int, kind: str, index: int | None = None) -> np.random.Generator:
    """Independent generator for one mechanism.

    Agent mechanisms use ``substream(seed, "partial", i)`` and the constraint
    mechanism ``substream(seed, "g")``.
    """
    if kind not in _STREAM_TAGS:
        raise PrivacyError(f"unknown stream kind {kind!r}")
    key = (_STREAM_TAGS[kind],) if index is None else (_STREAM_TAGS[kind], int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(eq=False)
class GaussianMechanism:
    """Source of i.i.d. ``N(0, sigma^2 I)`` vectors of length ``dimension``.

    Standard normals are drawn from ``rng`` in blocks; block boundaries do not
    change the sequence of returned vectors. A mechanism must not be shared
    between threads.
    """

    sigma: float
    dimension: int
    rng: np.random.Generator
    block: int = 4096
    _buf: np.ndarray = field(default=None, init=False, repr=False)
    _pos: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise PrivacyError("sigma must be non-negative")
        if self.dimension < 1:
            raise PrivacyError("dimension must be positive")

    def _refill(self):
        self._buf = self.rng.standard_normal((self.block, self.dimension))
        self._pos = 0

    def draw(self) -> np.ndarray:
        if self._buf is None or self._pos == self._buf.shape[0]:
            self._refill()
        z = self._buf[self._pos]
        self._pos += 1
        if self.sigma == 0:
            return np.zeros(self.dimension)
        return self.sigma * z

    def draw_many(self, count: int) -> np.ndarray:
        """The next ``count`` vectors as an array of shape ``(count, dimension)``."""
        out = np.empty((count, self.dimension))
        filled = 0
        while filled < count:
            if self._buf is None or self._pos == self._buf.shape[0]:
                self._refill()
            take = min(count - filled, self._buf.shape[0] - self._pos)
            out[filled : filled + take] = self._buf[self._pos : self._pos + take]
            self._pos += take
            filled += take
        if self.sigma == 0:
            return np.zeros_like(out)
        return self.sigma * out


def draw_noise(mech: GaussianMechanism) -> np.ndarray:
    return mech.draw()


def adjacency_check(u, u_tilde, b) -> bool:
    """Whether two finite signals are adjacent.

    ``u`` and ``u_tilde`` have shape ``(T, n)``: column ``i`` is the signal of
    agent ``i+1``. They are adjacent iff they differ in at most one column and
    that column's difference has l2 norm at most ``b[i]``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(u_tilde, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if u.ndim == 1:
        u = u[:, None]
    if v.ndim == 1:
        v = v[:, None]
    if u.shape != v.shape:
        raise PrivacyError(f"signal shapes differ: {u.shape} vs {v.shape}")
    if u.shape[1] != b.size:
        raise PrivacyError(f"signals have {u.shape[1]} components but b has {b.size}")
    diff = np.linalg.norm(u - v, axis=0)
    changed = np.flatnonzero(diff > 0)
    if changed.size == 0:
        return True
    if changed.size > 1:
        return False
    i = changed[0]
    return bool(diff[i] <= b[i])
