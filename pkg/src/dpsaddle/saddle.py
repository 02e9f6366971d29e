"""
Noisy projected primal-dual iteration for the saddle point of the Lagrangian.

Each step reads the same ``(x(k), mu(k))`` and computes

    x(k+1)  = P_X[x(k) - gamma(k) (f'(x(k)) + (dg/dx + W)^T mu(k) + alpha(k) x(k))]
    mu(k+1) = [mu(k) + gamma(k) (g(x(k)) + w_g - alpha(k) mu(k))]_+

where ``W`` (column ``i`` drawn by agent ``i``'s mechanism) and ``w_g`` are
the privacy noises. A noiseless run of the same iteration serves as the
reference-point oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .privacy import GaussianMechanism, NoiseCalibration, substream
from .problem import Problem, ProblemError, project_box, project_nonneg
from .schedule import Schedule

__all__ = [
    "SaddleState",
    "ReferencePoint",
    "NoiseLog",
    "RunTrace",
    "ReferenceNotConvergedError",
    "primal_step",
    "dual_step",
    "run",
    "run_batch",
    "compute_reference",
    "make_mechanisms",
]

NOISE_BLOCK = 4096


class ReferenceNotConvergedError(RuntimeError):
    """The oracle hit ``max_iters`` before the movement dropped below ``tol``."""

    def __init__(self, point: "ReferencePoint", tol: float):
        self.point = point
        super().__init__(
            f"reference iteration did not converge in {point.iterations} iterations "
            f"(last movement {point.residual:.3e} >= tol {tol:.3e})"
        )


@dataclass
class SaddleState:
    k: int
    x: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).ravel()
        self.mu = np.array(self.mu, dtype=float).ravel()
        if np.any(self.mu < 0):
            raise ProblemError("initial multipliers must be non-negative")

    @classmethod
    def zeros(cls, problem: Problem) -> "SaddleState":
        return cls(0, np.zeros(problem.n), np.zeros(problem.m))

    def validate(self, problem: Problem):
        if self.x.size != problem.n or self.mu.size != problem.m:
            raise ProblemError(
                f"state has dimensions ({self.x.size}, {self.mu.size}), problem needs ({problem.n}, {problem.m})"
            )
        if not problem.domain.contains(self.x):
            raise ProblemError("initial x lies outside the domain")


@dataclass(frozen=True)
class ReferencePoint:
    x_hat: np.ndarray
    mu_hat: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True


@dataclass
class NoiseLog:
    """Every noise draw of a run: ``partial[k, i, j]`` is component ``j`` of ``w_{i+1}(k)``."""

    partial: np.ndarray
    g: np.ndarray

    @property
    def rounds(self) -> int:
        return self.g.shape[0]


@dataclass
class RunTrace:
    """Snapshots of a run every ``stride`` iterations (plus the final one)."""

    stride: int
    k: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    reference: ReferencePoint | None = None
    seed: int | None = None
    noise_log: NoiseLog | None = None
    err_x: np.ndarray = field(init=False)
    err_mu: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.reference is None:
            self.err_x = np.full(self.k.shape, np.nan)
            self.err_mu = np.full(self.k.shape, np.nan)
        else:
            self.err_x = np.linalg.norm(self.x - self.reference.x_hat, axis=1)
            self.err_mu = np.linalg.norm(self.mu - self.reference.mu_hat, axis=1)

    @property
    def final(self) -> SaddleState:
        return SaddleState(int(self.k[-1]), self.x[-1], self.mu[-1])

    def at(self, k: int) -> int:
        """Row index of iteration ``k``."""
        rows = np.flatnonzero(self.k == k)
        if rows.size == 0:
            raise KeyError(f"iteration {k} was not recorded")
        return int(rows[0])

    def with_reference(self, reference: ReferencePoint) -> "RunTrace":
        return RunTrace(self.stride, self.k, self.x, self.mu, reference, self.seed, self.noise_log)


# ---------------------------------------------------------------------------
# Single steps (reference implementation of the update arithmetic)


def _primal_terms(problem: Problem, schedule: Schedule, st: SaddleState, noisy_jac, mu_in):
    noisy_jac = np.asarray(noisy_jac, dtype=float)
    mu_in = np.asarray(mu_in, dtype=float).ravel()
    if noisy_jac.shape != (problem.m, problem.n):
        raise ProblemError(f"noisy Jacobian must have shape {(problem.m, problem.n)}, got {noisy_jac.shape}")
    if mu_in.size != problem.m:
        raise ProblemError(f"expected {problem.m} multipliers, got {mu_in.size}")
    if np.any(mu_in < 0):
        raise ProblemError("multipliers must be non-negative")
    return noisy_jac, mu_in


def primal_step(problem: Problem, schedule: Schedule, st: SaddleState, noisy_jac, mu_in, gamma=None, alpha=None):
    """Projected primal update from a (possibly noisy) Jacobian.

    Component ``i`` uses only ``f_i'``, column ``i`` of ``noisy_jac``, the
    multipliers and the schedule. ``gamma`` / ``alpha`` override the
    schedule values at ``st.k``.
    """
    noisy_jac, mu_in = _primal_terms(problem, schedule, st, noisy_jac, mu_in)
    gam = schedule.gamma_at(st.k) if gamma is None else float(gamma)
    al = schedule.alpha_at(st.k) if alpha is None else float(alpha)
    x = st.x
    _, _, df = problem.evaluate_all(list(x))
    out = np.empty(problem.n)
    for i in range(problem.n):
        acc = df[i]
        for j in range(problem.m):
            acc = acc + noisy_jac[j, i] * mu_in[j]
        out[i] = x[i] - gam * (acc + al * x[i])
    return project_box(problem.domain, out)


def dual_step(problem: Problem, schedule: Schedule, st: SaddleState, noisy_g, gamma=None, alpha=None):
    """Projected multiplier update from (possibly noisy) constraint values."""
    noisy_g = np.asarray(noisy_g, dtype=float).ravel()
    if noisy_g.size != problem.m:
        raise ProblemError(f"expected {problem.m} constraint values, got {noisy_g.size}")
    gam = schedule.gamma_at(st.k) if gamma is None else float(gamma)
    al = schedule.alpha_at(st.k) if alpha is None else float(alpha)
    return project_nonneg(st.mu + gam * (noisy_g - al * st.mu))


# ---------------------------------------------------------------------------
# Generated step kernels


def _build_step(problem: Problem, vectorized: bool, noisy: bool):
    """Straight-line code for one synchronous step.

    The arithmetic matches :func:`primal_step` / :func:`dual_step` and the
    agents of :mod:`dpsaddle.cloudsim` operation for operation, which keeps
    all execution paths bit-identical.
    """
    n, m = problem.n, problem.m
    gen = ex._CodeGen()
    g_names = [gen.emit(e) for e in problem.constraints]
    jac_names = [[gen.emit(e) for e in row] for row in problem.jacobian_exprs]
    df_names = [gen.emit(e) for e in problem.objective_derivatives]
    lo, hi = problem.domain.lower, problem.domain.upper

    lines = ["def _step(x, mu, gam, al, W, wg):"]
    lines.append("    " + ", ".join(f"x{i}" for i in range(1, n + 1)) + ", = x")
    lines.append("    " + ", ".join(f"mu{j}" for j in range(1, m + 1)) + ", = mu")
    lines += [f"    {line}" for line in gen.lines]
    for i in range(1, n + 1):
        terms = [df_names[i - 1]]
        if noisy:
            lines.append(f"    w = W[{i - 1}]")
        for j in range(1, m + 1):
            entry = jac_names[j - 1][i - 1]
            if noisy:
                terms.append(f"({entry} + w[{j - 1}])*mu{j}")
            elif entry != "(0.0)":
                terms.append(f"{entry}*mu{j}")
        lines.append(f"    a = {' + '.join(terms)}")
        lines.append(f"    v = x{i} - gam*(a + al*x{i})")
        lo_i, hi_i = repr(float(lo[i - 1])), repr(float(hi[i - 1]))
        if vectorized:
            lines.append(f"    y{i} = _min(_max(v, {lo_i}), {hi_i})")
        else:
            lines.append(f"    y{i} = {lo_i} if v < {lo_i} else ({hi_i} if v > {hi_i} else v)")
    for j in range(1, m + 1):
        gval = f"({g_names[j - 1]} + wg[{j - 1}])" if noisy else g_names[j - 1]
        lines.append(f"    d = mu{j} + gam*({gval} - al*mu{j})")
        if vectorized:
            lines.append(f"    nu{j} = _max(d, 0.0)")
        else:
            lines.append(f"    nu{j} = d if d > 0.0 else 0.0")
    ys = ", ".join(f"y{i}" for i in range(1, n + 1))
    nus = ", ".join(f"nu{j}" for j in range(1, m + 1))
    lines.append(f"    return [{ys}], [{nus}]")
    src = "\n".join(lines) + "\n"
    ns = {"_min": np.minimum, "_max": np.maximum}
    exec(compile(src, "<dpsaddle.saddle step>", "exec"), ns)
    fn = ns["_step"]
    fn.source = src
    return fn


_STEP_CACHE: dict = {}


def step_kernel(problem: Problem, vectorized: bool = False, noisy: bool = True):
    key = (id(problem), vectorized, noisy)
    hit = _STEP_CACHE.get(key)
    if hit is not None and hit[0] is problem:
        return hit[1]
    fn = _build_step(problem, vectorized, noisy)
    _STEP_CACHE[key] = (problem, fn)
    return fn


# ---------------------------------------------------------------------------
# Noise sources


def make_mechanisms(cal: NoiseCalibration, m: int, seed: int, block: int = NOISE_BLOCK):
    """One mechanism per agent plus one for ``g``, each on its own substream."""
    partial = [
        GaussianMechanism(float(s), m, substream(seed, "partial", i), block)
        for i, s in enumerate(cal.sigma_partial, start=1)
    ]
    gmech = GaussianMechanism(cal.sigma_g, m, substream(seed, "g"), block)
    return partial, gmech


class _SeededNoise:
    def __init__(self, cal: NoiseCalibration, m: int, seed: int):
        self.partial, self.gmech = make_mechanisms(cal, m, seed)

    def block(self, count: int):
        W = np.stack([mech.draw_many(count) for mech in self.partial], axis=1)
        return W, self.gmech.draw_many(count)


class _ReplayNoise:
    def __init__(self, log: NoiseLog):
        self.log = log
        self.pos = 0

    def block(self, count: int):
        if self.pos + count > self.log.rounds:
            raise ValueError(f"noise log holds {self.log.rounds} rounds, run needs more")
        sl = slice(self.pos, self.pos + count)
        self.pos += count
        return self.log.partial[sl], self.log.g[sl]


# ---------------------------------------------------------------------------
# Drivers


def _record_plan(iters: int, stride: int) -> set:
    ks = set(range(0, iters + 1, stride))
    ks.add(iters)
    return ks


def _check_run_args(problem: Problem, init: SaddleState, iters: int, stride: int):
    init.validate(problem)
    if iters < 0:
        raise ValueError("iters must be non-negative")
    if stride < 1:
        raise ValueError("stride must be positive")


def run(
    problem: Problem,
    schedule: Schedule,
    cal: NoiseCalibration,
    init: SaddleState,
    iters: int,
    seed: int = 0,
    stride: int = 1,
    reference: ReferencePoint | None = None,
    log_noise: bool = False,
    replay: NoiseLog | None = None,
    debug: bool = False,
) -> RunTrace:
    """Run the noisy iteration for ``iters`` steps from ``init``.

    Noise comes from per-mechanism substreams of ``seed``, or from ``replay``
    when given. The result is deterministic in ``seed``.

    Parameters
    ----------
    log_noise : bool
        Keep every noise draw in ``trace.noise_log``.
    debug : bool
        Assert ``x`` in the domain and ``mu >= 0`` after every step.
    """
    _check_run_args(problem, init, iters, stride)
    n, m = problem.n, problem.m
    noisy = replay is not None or not cal.is_noiseless
    step = step_kernel(problem, vectorized=False, noisy=noisy)
    source = _ReplayNoise(replay) if replay is not None else _SeededNoise(cal, m, seed)
    plan = _record_plan(iters, stride)

    x = [float(v) for v in init.x]
    mu = [float(v) for v in init.mu]
    k0 = init.k
    ks, xs, mus = [k0], [list(x)], [list(mu)]
    logs_W, logs_g = [], []
    lo, hi = problem.domain.lower, problem.domain.upper
    gamma_at, alpha_at = schedule.gamma_at, schedule.alpha_at

    done = 0
    while done < iters:
        count = min(NOISE_BLOCK, iters - done)
        if noisy:
            Wb, gb = source.block(count)
            if log_noise:
                logs_W.append(Wb)
                logs_g.append(gb)
            W_list, g_list = Wb.tolist(), gb.tolist()
        for t in range(count):
            k = k0 + done + t
            if noisy:
                x, mu = step(x, mu, gamma_at(k), alpha_at(k), W_list[t], g_list[t])
            else:
                x, mu = step(x, mu, gamma_at(k), alpha_at(k), None, None)
            if debug:
                assert all(lo[i] <= x[i] <= hi[i] for i in range(n)), f"x left the domain at k={k + 1}"
                assert all(v >= 0 for v in mu), f"negative multiplier at k={k + 1}"
            if (done + t + 1) in plan:
                ks.append(k + 1)
                xs.append(list(x))
                mus.append(list(mu))
        done += count

    noise_log = None
    if log_noise:
        if logs_W:
            noise_log = NoiseLog(np.concatenate(logs_W), np.concatenate(logs_g))
        else:
            noise_log = NoiseLog(np.zeros((0, n, m)), np.zeros((0, m)))
    return RunTrace(stride, np.array(ks), np.array(xs), np.array(mus), reference, seed, noise_log)


def run_batch(
    problem: Problem,
    schedule: Schedule,
    cal: NoiseCalibration,
    init: SaddleState,
    iters: int,
    seeds: Sequence[int],
    stride: int = 1,
    reference: ReferencePoint | None = None,
) -> list[RunTrace]:
    """Run several seeds at once, vectorised over seeds.

    Each returned trace is bit-identical to ``run`` with the same seed.
    """
    _check_run_args(problem, init, iters, stride)
    seeds = list(seeds)
    S = len(seeds)
    if S == 0:
        return []
    n, m = problem.n, problem.m
    noisy = not cal.is_noiseless
    step = step_kernel(problem, vectorized=True, noisy=noisy)
    sources = [_SeededNoise(cal, m, s) for s in seeds]
    plan = _record_plan(iters, stride)

    x = [np.full(S, float(v)) for v in init.x]
    mu = [np.full(S, float(v)) for v in init.mu]
    k0 = init.k
    ks = [k0]
    xs = [np.array(x)]
    mus = [np.array(mu)]
    gamma_at, alpha_at = schedule.gamma_at, schedule.alpha_at

    done = 0
    while done < iters:
        count = min(NOISE_BLOCK, iters - done)
        if noisy:
            blocks = [src.block(count) for src in sources]
            # (count, n, m, S) and (count, m, S)
            Wb = np.ascontiguousarray(np.stack([b[0] for b in blocks], axis=-1))
            gb = np.ascontiguousarray(np.stack([b[1] for b in blocks], axis=-1))
        for t in range(count):
            k = k0 + done + t
            if noisy:
                x, mu = step(x, mu, gamma_at(k), alpha_at(k), Wb[t], gb[t])
            else:
                x, mu = step(x, mu, gamma_at(k), alpha_at(k), None, None)
            if (done + t + 1) in plan:
                ks.append(k + 1)
                xs.append(np.array([np.broadcast_to(v, (S,)) for v in x]))
                mus.append(np.array([np.broadcast_to(v, (S,)) for v in mu]))
        done += count

    K = np.array(ks)
    X = np.stack(xs)  # (rows, n, S)
    M = np.stack(mus)
    return [RunTrace(stride, K, X[:, :, s].copy(), M[:, :, s].copy(), reference, seed) for s, seed in enumerate(seeds)]


def compute_reference(
    problem: Problem,
    schedule: Schedule,
    init: SaddleState | None = None,
    tol: float = 1e-9,
    max_iters: int = 5_000_000,
    raise_on_failure: bool = True,
) -> ReferencePoint:
    """Approximate the saddle point with the noiseless iteration.

    Stops once ``max(|x(k+1) - x(k)|, |mu(k+1) - mu(k)|) < tol`` (Euclidean
    norms) or after ``max_iters`` steps.

    Raises
    ------
    ReferenceNotConvergedError
        If ``max_iters`` is reached first and ``raise_on_failure`` is set.
        The exception's ``point`` holds the last iterate and its movement.
    """
    if not tol > 0 and raise_on_failure:
        raise ValueError("tol must be positive")
    init = SaddleState.zeros(problem) if init is None else init
    init.validate(problem)
    step = step_kernel(problem, vectorized=False, noisy=False)
    x = [float(v) for v in init.x]
    mu = [float(v) for v in init.mu]
    gamma_at, alpha_at = schedule.gamma_at, schedule.alpha_at
    dist = math.dist
    k = init.k
    movement = math.inf
    it = 0
    while it < max_iters:
        xn, mun = step(x, mu, gamma_at(k), alpha_at(k), None, None)
        movement = max(dist(xn, x), dist(mun, mu))
        x, mu = xn, mun
        k += 1
        it += 1
        if movement < tol:
            break
    point = ReferencePoint(np.array(x), np.array(mu), movement, it, movement < tol)
    if not point.converged and raise_on_failure:
        raise ReferenceNotConvergedError(point, tol)
    return point
