"""
Experiment configuration files and orchestration.

A configuration is a single JSON object; see ``seven_agent.json`` in the
package data for a complete example. ``load_config`` validates the whole
file and reports every problem it finds at once.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import expr as ex
from . import privacy as pv
from . import saddle
from .cloudsim import run_simulation
from .problem import BoxDomain, Problem, ProblemError
from .saddle import ReferencePoint, RunTrace, SaddleState
from .schedule import Schedule

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ReferenceSource",
    "SummaryReport",
    "load_config",
    "parse_config",
    "preset_text",
    "seven_agent_preset",
    "lipschitz_constants",
    "calibration",
    "reference_point",
    "preflight",
    "run_experiment",
    "write_trace_csv",
]

MODES = ("centralized", "cloudsim", "noiseless")


class ConfigError(ValueError):
    """One or more problems in a configuration; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "\n".join(f"  {p}: {msg}" for p, msg in self.errors)
        super().__init__(f"invalid configuration ({len(self.errors)} problem(s)):\n{lines}")


@dataclass(frozen=True)
class ReferenceSource:
    """How to obtain the reference saddle point: given values, a file, or the noiseless oracle."""

    x_hat: np.ndarray | None = None
    mu_hat: np.ndarray | None = None
    file: str | None = None
    schedule: Schedule | None = None
    tol: float = 1e-9
    max_iters: int = 5_000_000


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    n: int
    m: int
    problem: Problem
    privacy: pv.PrivacyParams
    lipschitz_partial: np.ndarray | None
    lipschitz_g: float | None
    grid_points_per_axis: int
    sigma_partial: np.ndarray | None
    sigma_g: float | None
    schedule: Schedule
    x0: np.ndarray
    mu0: np.ndarray
    iterations: int
    seed: int
    stride: int
    mode: str
    reference: ReferenceSource
    raw: dict = field(repr=False, default_factory=dict)
    source: str | None = None

    @property
    def init(self) -> SaddleState:
        return SaddleState(0, self.x0, self.mu0)

    def replace_run(self, **changes) -> "ExperimentConfig":
        """Copy with some of ``iterations``, ``seed``, ``stride``, ``mode`` changed."""
        raw = json.loads(json.dumps(self.raw))
        for key, value in changes.items():
            if value is not None:
                raw.setdefault("run", {})[key] = value
        return parse_config(raw, self.source)


@dataclass
class SummaryReport:
    final_k: int
    err_x: float
    err_mu: float
    reference: dict
    calibration: dict
    lipschitz: dict
    wall_clock_seconds: float
    seed: int
    mode: str
    iterations: int
    trace_path: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# Parsing helpers


class _Collector:
    def __init__(self):
        self.errors: list[tuple[str, str]] = []

    def add(self, path: str, msg: str):
        self.errors.append((path, msg))

    def number(self, obj: dict, key: str, path: str, default=None, required=True, integer=False):
        p = f"{path}.{key}" if path else key
        if key not in obj or obj[key] is None:
            if required and default is None:
                self.add(p, "missing")
            return default
        v = obj[key]
        if isinstance(v, bool):
            self.add(p, "expected a number")
            return default
        if isinstance(v, str):
            try:
                e = ex.parse(v, 1)
            except ex.ExpressionError as err:
                self.add(p, f"not a number: {err}")
                return default
            if not isinstance(e, ex.Const):
                self.add(p, "expected a constant")
                return default
            v = e.value
        if not isinstance(v, (int, float)):
            self.add(p, "expected a number")
            return default
        if integer:
            if float(v) != int(v):
                self.add(p, "expected an integer")
                return default
            return int(v)
        return float(v)

    def vector(self, obj: dict, key: str, path: str, length: int | None, required=True, scalar_ok=False):
        p = f"{path}.{key}" if path else key
        if key not in obj or obj[key] is None:
            if required:
                self.add(p, "missing")
            return None
        v = obj[key]
        if scalar_ok and isinstance(v, (int, float)) and not isinstance(v, bool):
            if length is None:
                self.add(p, "scalar given but the length is unknown")
                return None
            return np.full(length, float(v))
        if not isinstance(v, list) or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v):
            self.add(p, "expected a list of numbers")
            return None
        arr = np.array(v, dtype=float)
        if length is not None and arr.size != length:
            self.add(p, f"expected {length} entries, got {arr.size}")
            return None
        return arr

    def section(self, obj: dict, key: str, required=True) -> dict:
        v = obj.get(key)
        if v is None:
            if required:
                self.add(key, "missing section")
            return {}
        if not isinstance(v, dict):
            self.add(key, "expected an object")
            return {}
        return v


def _schedule(c: _Collector, obj: dict, path: str) -> Schedule | None:
    vals = [c.number(obj, k, path) for k in ("gamma_bar", "alpha_bar", "c1", "c2")]
    if any(v is None for v in vals):
        return None
    problems = Schedule.violations(*vals)
    for msg in problems:
        c.add(path, msg)
    return None if problems else Schedule(*vals)


def parse_config(raw: dict, source: str | None = None) -> ExperimentConfig:
    """Validate a configuration object (already decoded from JSON)."""
    c = _Collector()
    if not isinstance(raw, dict):
        raise ConfigError([("", "top level must be an object")])
    known = {"description", "n", "m", "domain", "objectives", "constraints", "privacy", "schedule", "init", "run", "reference"}
    for key in raw:
        if key not in known:
            c.add(key, "unknown field")

    n = c.number(raw, "n", "", integer=True)
    m = c.number(raw, "m", "", integer=True)
    if n is not None and n < 1:
        c.add("n", "must be at least 1")
        n = None
    if m is not None and m < 1:
        c.add("m", "must be at least 1")
        m = None

    dom = c.section(raw, "domain")
    lower = c.vector(dom, "lower", "domain", n, scalar_ok=True)
    upper = c.vector(dom, "upper", "domain", n, scalar_ok=True)
    domain = None
    if lower is not None and upper is not None:
        try:
            domain = BoxDomain(lower, upper)
        except ProblemError as err:
            c.add("domain", str(err))

    def expressions(key, count):
        items = raw.get(key)
        if items is None:
            c.add(key, "missing")
            return None
        if not isinstance(items, list):
            c.add(key, "expected a list of expression strings")
            return None
        out = []
        for idx, text in enumerate(items):
            p = f"{key}[{idx}]"
            if not isinstance(text, str):
                c.add(p, "expected a string")
                out.append(None)
                continue
            try:
                out.append(ex.parse(text, n if n else 1))
            except ex.ExpressionError as err:
                c.add(p, str(err))
                out.append(None)
        if count is not None and len(items) != count:
            what = "objective" if key == "objectives" else "constraint"
            for idx in range(len(items), count):
                c.add(f"{key}[{idx}]", f"missing {what} for {'agent' if key == 'objectives' else 'constraint'} {idx + 1}")
            if len(items) > count:
                c.add(key, f"expected {count} entries, got {len(items)}")
        return out

    objectives = expressions("objectives", n)
    constraints = expressions("constraints", m)
    problem = None
    if (
        domain is not None
        and objectives is not None
        and constraints is not None
        and None not in objectives
        and None not in constraints
        and len(objectives) == n
        and len(constraints) == m
    ):
        try:
            problem = Problem(tuple(objectives), tuple(constraints), domain)
        except ProblemError as err:
            c.add("objectives", str(err))

    pr = c.section(raw, "privacy")
    eps = c.number(pr, "epsilon", "privacy")
    delta = c.number(pr, "delta", "privacy")
    b = c.vector(pr, "b", "privacy", n, scalar_ok=True)
    pp = None
    if eps is not None and delta is not None and b is not None:
        try:
            pp = pv.PrivacyParams(eps, delta, b)
        except pv.PrivacyError as err:
            c.add("privacy", str(err))
    grid = c.number(pr, "grid_points_per_axis", "privacy", default=201, required=False, integer=True)
    if grid is not None and grid < 2:
        c.add("privacy.grid_points_per_axis", "must be at least 2")
    lip_p = lip_g = None
    lip = pr.get("lipschitz")
    if lip is not None:
        if not isinstance(lip, dict):
            c.add("privacy.lipschitz", "expected an object with 'partial' and 'g'")
        else:
            lip_p = c.vector(lip, "partial", "privacy.lipschitz", n)
            lip_g = c.number(lip, "g", "privacy.lipschitz")
            if lip_p is not None and np.any(lip_p < 0):
                c.add("privacy.lipschitz.partial", "must be non-negative")
            if lip_g is not None and lip_g < 0:
                c.add("privacy.lipschitz.g", "must be non-negative")
    sig_p = sig_g = None
    sig = pr.get("sigma")
    if sig is not None:
        if not isinstance(sig, dict):
            c.add("privacy.sigma", "expected an object")
        else:
            sig_p = c.vector(sig, "partial", "privacy.sigma", n, required=False)
            sig_g = c.number(sig, "g", "privacy.sigma", required=False)

    schedule = _schedule(c, c.section(raw, "schedule"), "schedule")

    ini = c.section(raw, "init", required=False)
    x0 = c.vector(ini, "x0", "init", n, required=False, scalar_ok=True)
    mu0 = c.vector(ini, "mu0", "init", m, required=False, scalar_ok=True)
    if x0 is None and n is not None:
        x0 = np.zeros(n)
    if mu0 is None and m is not None:
        mu0 = np.zeros(m)
    if domain is not None and x0 is not None and not domain.contains(x0):
        c.add("init.x0", "lies outside the domain")
    if mu0 is not None and np.any(mu0 < 0):
        c.add("init.mu0", "must be non-negative")

    rn = c.section(raw, "run", required=False)
    iterations = c.number(rn, "iterations", "run", default=0, required=False, integer=True)
    seed = c.number(rn, "seed", "run", default=0, required=False, integer=True)
    stride = c.number(rn, "stride", "run", default=1, required=False, integer=True)
    mode = rn.get("mode", "centralized")
    if iterations is not None and iterations < 0:
        c.add("run.iterations", "must be non-negative")
    if stride is not None and stride < 1:
        c.add("run.stride", "must be positive")
    if mode not in MODES:
        c.add("run.mode", f"must be one of {', '.join(MODES)}")

    rf = c.section(raw, "reference", required=False)
    ref = ReferenceSource()
    if rf:
        if "x_hat" in rf or "mu_hat" in rf:
            ref = ReferenceSource(x_hat=c.vector(rf, "x_hat", "reference", n), mu_hat=c.vector(rf, "mu_hat", "reference", m))
        elif "file" in rf:
            if not isinstance(rf["file"], str):
                c.add("reference.file", "expected a path")
            else:
                ref = ReferenceSource(file=rf["file"])
        else:
            rs = rf.get("schedule")
            rsched = _schedule(c, rs, "reference.schedule") if isinstance(rs, dict) else None
            if rs is not None and not isinstance(rs, dict):
                c.add("reference.schedule", "expected an object")
            tol = c.number(rf, "tol", "reference", default=1e-9, required=False)
            mx = c.number(rf, "max_iters", "reference", default=5_000_000, required=False, integer=True)
            if tol is not None and tol <= 0:
                c.add("reference.tol", "must be positive")
            if mx is not None and mx < 1:
                c.add("reference.max_iters", "must be positive")
            ref = ReferenceSource(schedule=rsched, tol=tol, max_iters=mx)

    if c.errors:
        raise ConfigError(c.errors)
    return ExperimentConfig(
        n=n,
        m=m,
        problem=problem,
        privacy=pp,
        lipschitz_partial=lip_p,
        lipschitz_g=lip_g,
        grid_points_per_axis=grid,
        sigma_partial=sig_p,
        sigma_g=sig_g,
        schedule=schedule,
        x0=x0,
        mu0=mu0,
        iterations=iterations,
        seed=seed,
        stride=stride,
        mode=mode,
        reference=ref,
        raw=raw,
        source=source,
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON configuration file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError([("", f"malformed JSON: {err}")]) from err
    return parse_config(raw, str(path))


def preset_text() -> str:
    return resources.files("dpsaddle").joinpath("data/seven_agent.json").read_text()


def seven_agent_preset() -> ExperimentConfig:
    return parse_config(json.loads(preset_text()), "<seven-agent preset>")


# ---------------------------------------------------------------------------
# Orchestration


def lipschitz_constants(cfg: ExperimentConfig):
    """``(partials, K_g, source)``; estimated on the grid unless the config supplies them."""
    if cfg.lipschitz_partial is not None and cfg.lipschitz_g is not None:
        return cfg.lipschitz_partial, cfg.lipschitz_g, "config"
    partials, kg = pv.lipschitz_table(cfg.problem, cfg.grid_points_per_axis)
    return partials, kg, "estimated"


def calibration(cfg: ExperimentConfig, lipschitz=None) -> pv.NoiseCalibration:
    partials, kg, _ = lipschitz if lipschitz is not None else lipschitz_constants(cfg)
    return pv.calibrate(partials, kg, cfg.privacy, cfg.sigma_partial, cfg.sigma_g)


_REFERENCE_CACHE: dict = {}


def reference_point(cfg: ExperimentConfig) -> ReferencePoint:
    """Reference saddle point from the config (given, loaded, or computed by the noiseless oracle)."""
    src = cfg.reference
    if src.x_hat is not None:
        return ReferencePoint(src.x_hat, src.mu_hat)
    if src.file is not None:
        base = Path(cfg.source).parent if cfg.source and not cfg.source.startswith("<") else Path(".")
        data = json.loads((base / src.file).read_text())
        return ReferencePoint(
            np.array(data["x_hat"], dtype=float),
            np.array(data["mu_hat"], dtype=float),
            float(data.get("residual", 0.0)),
            int(data.get("iterations", 0)),
            bool(data.get("converged", True)),
        )
    sched = src.schedule or cfg.schedule
    key = (
        json.dumps([cfg.raw.get(k) for k in ("domain", "objectives", "constraints")], sort_keys=True),
        sched,
        src.tol,
        src.max_iters,
        tuple(cfg.x0),
        tuple(cfg.mu0),
    )
    hit = _REFERENCE_CACHE.get(key)
    if hit is None:
        hit = saddle.compute_reference(cfg.problem, sched, cfg.init, src.tol, src.max_iters)
        _REFERENCE_CACHE[key] = hit
    return hit


def reference_to_dict(ref: ReferencePoint) -> dict:
    return {
        "x_hat": ref.x_hat.tolist(),
        "mu_hat": ref.mu_hat.tolist(),
        "residual": float(ref.residual),
        "iterations": int(ref.iterations),
        "converged": bool(ref.converged),
    }


def calibration_to_dict(cal: pv.NoiseCalibration) -> dict:
    return {
        "kappa": cal.kappa_value,
        "sigma_partial": cal.sigma_partial.tolist(),
        "variance_partial": cal.variances.tolist(),
        "sigma_g": cal.sigma_g,
        "variance_g": cal.sigma_g**2,
    }


def write_trace_csv(trace: RunTrace, fh, full_state: bool = False):
    """Write ``k,err_x,err_mu`` rows (plus the state with ``full_state``), 17 significant digits."""
    n = trace.x.shape[1]
    m = trace.mu.shape[1]
    header = ["k", "err_x", "err_mu"]
    if full_state:
        header += [f"x_{i}" for i in range(1, n + 1)] + [f"mu_{j}" for j in range(1, m + 1)]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    fmt = "{:.17g}".format
    for r in range(trace.k.size):
        row = [str(int(trace.k[r])), fmt(trace.err_x[r]), fmt(trace.err_mu[r])]
        if full_state:
            row += [fmt(v) for v in trace.x[r]] + [fmt(v) for v in trace.mu[r]]
        w.writerow(row)


def trace_csv_text(trace: RunTrace, full_state: bool = False) -> str:
    buf = io.StringIO()
    write_trace_csv(trace, buf, full_state)
    return buf.getvalue()


def preflight(cfg: ExperimentConfig) -> list[str]:
    """Warn about a missing Slater point or a failed convexity spot-check.

    Candidates for the Slater point are the initial state and the domain
    centre. The convexity check uses its own fixed generator, never the
    noise streams. Returns the warning messages.
    """
    msgs = []
    p = cfg.problem
    centre = 0.5 * (p.domain.lower + p.domain.upper)
    if not (p.slater_check(cfg.x0) or p.slater_check(centre)):
        msgs.append("neither the initial state nor the domain centre is strictly feasible; a saddle point may not exist")
    for name, _, _ in p.convexity_spot_check(warn=False):
        msgs.append(f"{name} failed a midpoint convexity check; convergence is not guaranteed")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=3)
    return msgs


def run_experiment(
    cfg: ExperimentConfig,
    out: str | Path | None = None,
    full_state: bool = False,
    round_log: str | Path | None = None,
):
    """Calibrate, obtain the reference, run, and summarise.

    Returns ``(trace, summary)``. With ``out`` the trace CSV is written there
    and its path recorded in the summary; ``round_log`` (cloudsim mode only)
    receives the line-delimited message log.
    """
    t0 = time.perf_counter()
    preflight(cfg)
    lip = lipschitz_constants(cfg)
    cal = calibration(cfg, lip)
    ref = reference_point(cfg)
    run_cal = pv.NoiseCalibration.zero(cfg.n) if cfg.mode == "noiseless" else cal
    if cfg.mode == "cloudsim":
        fh = open(round_log, "w") if round_log is not None else None
        try:
            trace = run_simulation(cfg.problem, cfg.schedule, run_cal, cfg.init, cfg.iterations, cfg.seed, cfg.stride, ref, fh)
        finally:
            if fh is not None:
                fh.close()
    else:
        trace = saddle.run(cfg.problem, cfg.schedule, run_cal, cfg.init, cfg.iterations, cfg.seed, cfg.stride, ref)
    elapsed = time.perf_counter() - t0
    trace_path = None
    if out is not None:
        trace_path = str(out)
        with open(out, "w", newline="") as fh:
            write_trace_csv(trace, fh, full_state)
    summary = _summary(cfg, trace, ref, cal, lip, elapsed, trace_path)
    return trace, summary


def run_experiment_batch(cfg: ExperimentConfig, seeds, out_pattern: str | None = None, full_state: bool = False):
    """Centralised or noiseless runs for several seeds, vectorised over seeds.

    ``out_pattern`` may contain ``{seed}``. Returns a list of ``(trace, summary)``.
    """
    if cfg.mode == "cloudsim":
        return [run_experiment(cfg.replace_run(seed=s), _fmt_out(out_pattern, s), full_state) for s in seeds]
    t0 = time.perf_counter()
    preflight(cfg)
    lip = lipschitz_constants(cfg)
    cal = calibration(cfg, lip)
    ref = reference_point(cfg)
    run_cal = pv.NoiseCalibration.zero(cfg.n) if cfg.mode == "noiseless" else cal
    traces = saddle.run_batch(cfg.problem, cfg.schedule, run_cal, cfg.init, cfg.iterations, list(seeds), cfg.stride, ref)
    elapsed = time.perf_counter() - t0
    results = []
    for s, tr in zip(seeds, traces):
        path = _fmt_out(out_pattern, s)
        if path is not None:
            with open(path, "w", newline="") as fh:
                write_trace_csv(tr, fh, full_state)
        c = cfg.replace_run(seed=s)
        results.append((tr, _summary(c, tr, ref, cal, lip, elapsed, path)))
    return results


def _fmt_out(pattern, seed):
    if pattern is None:
        return None
    p = str(pattern)
    if "{seed}" in p:
        return p.format(seed=seed)
    path = Path(p)
    return str(path.with_name(f"{path.stem}-seed{seed}{path.suffix}"))


def _summary(cfg, trace, ref, cal, lip, elapsed, trace_path) -> SummaryReport:
    partials, kg, source = lip
    return SummaryReport(
        final_k=int(trace.k[-1]),
        err_x=float(trace.err_x[-1]),
        err_mu=float(trace.err_mu[-1]),
        reference=reference_to_dict(ref),
        calibration=calibration_to_dict(cal),
        lipschitz={"partial": np.asarray(partials).tolist(), "g": float(kg), "source": source},
        wall_clock_seconds=elapsed,
        seed=cfg.seed,
        mode=cfg.mode,
        iterations=cfg.iterations,
        trace_path=trace_path,
    )
