"""Differentially private primal-dual saddle-point iteration for multi-agent problems.

Agents each own one scalar state and a convex objective; a trusted cloud holds
the shared inequality constraints and releases Gaussian-perturbed constraint
gradients and values. See the README for a tour.
"""

from .expr import parse, differentiate, evaluate, compile_functions
from .problem import BoxDomain, Problem, ProblemError
from .schedule import Schedule, ScheduleError
from .privacy import (
    GaussianMechanism,
    NoiseCalibration,
    PrivacyParams,
    calibrate,
    estimate_lipschitz,
    kappa,
    lipschitz_table,
)
from .saddle import ReferencePoint, RunTrace, SaddleState, compute_reference, run, run_batch
from .cloudsim import run_simulation
from .config import ConfigError, ExperimentConfig, load_config, seven_agent_preset, run_experiment

__version__ = "0.1.0"
