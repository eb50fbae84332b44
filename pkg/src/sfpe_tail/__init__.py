"""Tail index and tail constant of solutions to stochastic fixed point
equations V = A max(D, V) + B, by regeneration cycles and exponential
tilting."""

__version__ = "0.1.0"

from .drivers import DriverSpec, cumulant, make_driver, solve_xi, tilt
from .errors import SFPEError
from .estimators import (
    estimate_C,
    estimate_Cstar,
    estimate_theta,
    lundberg_bound,
    sup_closed_form,
    tail_curve,
)
from .regeneration import compute_drift_params, cycle_stats, make_regen, run_cycle, simulate_cycles
from .renewal_checks import overshoot_distribution, qu_diagnostic, renewal_function, theorem41_check
from .rng import Stream
from .sfpe_core import ModelSpec, backward_seqs, closed_form_forward, make_model, step, ztilde
from .stats import Estimate
from .tilt_engine import DualPolicy, importance_tail_estimate, run_dual_cycle, run_shifted_cycle

__all__ = [
    "DriverSpec",
    "DualPolicy",
    "Estimate",
    "ModelSpec",
    "SFPEError",
    "Stream",
    "backward_seqs",
    "closed_form_forward",
    "compute_drift_params",
    "cumulant",
    "cycle_stats",
    "estimate_C",
    "estimate_Cstar",
    "estimate_theta",
    "importance_tail_estimate",
    "lundberg_bound",
    "make_driver",
    "make_model",
    "make_regen",
    "overshoot_distribution",
    "qu_diagnostic",
    "renewal_function",
    "run_cycle",
    "run_dual_cycle",
    "run_shifted_cycle",
    "simulate_cycles",
    "solve_xi",
    "step",
    "sup_closed_form",
    "tail_curve",
    "theorem41_check",
    "tilt",
    "ztilde",
]
