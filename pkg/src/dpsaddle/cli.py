"""Command-line entry point: ``dpsaddle <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import privacy as pv
from .saddle import ReferenceNotConvergedError, compute_reference


def _seed_range(text: str) -> list[int]:
    a, sep, b = text.partition("..")
    try:
        lo, hi = int(a), int(b if sep else a)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if hi < lo:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return list(range(lo, hi + 1))


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpsaddle", description="Differentially private primal-dual saddle-point solver.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", type=Path, help="JSON experiment file (default: the built-in preset)")
        if run_flags:
            sp.add_argument("--iters", type=_nonneg, help="number of iterations")
            sp.add_argument("--seed", type=int, help="noise seed")
            sp.add_argument("--seeds", type=_seed_range, metavar="A..B", help="run every seed in A..B inclusive")
            sp.add_argument("--stride", type=_positive, help="record every N-th iterate")
            sp.add_argument("--out", help="trace CSV path; with --seeds may contain {seed}")
            sp.add_argument("--summary", type=Path, help="write the summary JSON here as well as to stdout")
            sp.add_argument("--full-state", action="store_true", help="include x_i and mu_j columns in the CSV")

    s = sub.add_parser("solve", help="centralised noisy iteration")
    common(s)
    s.add_argument("--mode", choices=cf.MODES, help="override the configured mode")
    s.add_argument("--round-log", type=Path, help="message log (cloudsim mode)")

    s = sub.add_parser("simulate", help="cloud/agent message-passing simulation")
    common(s)
    s.add_argument("--round-log", type=Path, help="write one JSON line per message")

    s = sub.add_parser("reference", help="noiseless oracle for the reference saddle point")
    common(s, run_flags=False)
    s.add_argument("--iters", type=_positive, help="iteration cap (default from the config)")
    s.add_argument("--out", type=Path, help="write the reference JSON here")

    s = sub.add_parser("calibrate", help="noise scales for the configured privacy level")
    common(s, run_flags=False)

    s = sub.add_parser("lipschitz", help="grid estimate of the Lipschitz constants")
    common(s, run_flags=False)
    s.add_argument("--grid", type=_positive, help="grid points per referenced axis")

    sub.add_parser("preset", aliases=["paper-preset"], help="print the built-in seven-agent experiment file")
    return p


def _load(args) -> cf.ExperimentConfig:
    return cf.load_config(args.config) if args.config else cf.seven_agent_preset()


def _emit(obj, path: Path | None = None):
    text = json.dumps(obj, indent=2, default=cf._json_default)
    print(text)
    if path is not None:
        Path(path).write_text(text + "\n")


def _cmd_run(args, mode: str | None) -> int:
    cfg = _load(args)
    cfg = cfg.replace_run(iterations=args.iters, seed=args.seed, stride=args.stride, mode=mode)
    if args.seeds:
        results = cf.run_experiment_batch(cfg, args.seeds, args.out, args.full_state)
        _emit([s.to_dict() for _, s in results], args.summary)
        return 0
    round_log = getattr(args, "round_log", None)
    _, summary = cf.run_experiment(cfg, args.out, args.full_state, round_log)
    _emit(summary.to_dict(), args.summary)
    return 0


def _cmd_reference(args) -> int:
    cfg = _load(args)
    src = cfg.reference
    sched = src.schedule or cfg.schedule
    cap = args.iters or src.max_iters
    ref = compute_reference(cfg.problem, sched, cfg.init, src.tol, cap)
    out = cf.reference_to_dict(ref)
    g = cfg.problem.constraint_values(ref.x_hat)
    out["g"] = np.asarray(g).tolist()
    out["complementarity"] = (ref.mu_hat * np.asarray(g)).tolist()
    _emit(out, args.out)
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _load(args)
    lip = cf.lipschitz_constants(cfg)
    cal = cf.calibration(cfg, lip)
    out = cf.calibration_to_dict(cal)
    out["lipschitz"] = {"partial": np.asarray(lip[0]).tolist(), "g": float(lip[1]), "source": lip[2]}
    out["epsilon"] = cfg.privacy.epsilon
    out["delta"] = cfg.privacy.delta
    out["B"] = cfg.privacy.B
    _emit(out)
    return 0


def _cmd_lipschitz(args) -> int:
    cfg = _load(args)
    grid = args.grid or cfg.grid_points_per_axis
    partials, kg = pv.lipschitz_table(cfg.problem, grid)
    _emit({"grid_points_per_axis": grid, "partial": partials.tolist(), "g": float(kg)})
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("preset", "paper-preset"):
            sys.stdout.write(cf.preset_text())
            return 0
        if args.command == "solve":
            return _cmd_run(args, args.mode)
        if args.command == "simulate":
            return _cmd_run(args, "cloudsim")
        if args.command == "reference":
            return _cmd_reference(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        if args.command == "lipschitz":
            return _cmd_lipschitz(args)
    except cf.ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    except ReferenceNotConvergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (OSError, ArithmeticError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
