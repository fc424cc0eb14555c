"""Floating early-exercise boundaries for American options under
time-inhomogeneous GBM and Ornstein-Uhlenbeck models.

Boundaries (none, one or two per time section) are found by solving the
value-matching Volterra equations backward in time; prices follow from the
early-exercise-premium decomposition.  ``floatbound.oracle`` provides an
independent Crank-Nicolson obstacle solver for verification.
"""

from .curves import (ModelSpec, ParamCurve, PiecewiseCurve, discount_factors, eval_curve,
                     integrate_curve, sigma_bar)
from .errors import (ComplexityError, ConfigError, ConsistencyError, DomainError, GridError,
                     UnsupportedRegimeError)
from .gbm import (PricingResult, american_call_single_boundary, american_put, d_pm, eep_pi,
                  european_call, european_put, psi1_psi2)
from .regime import RegimeSegment, classify_point, segment_timeline, switch_times
from .solver import (ExerciseBoundary, SolveReport, SolverConfig, detect_events, solve_boundary,
                     solve_call_boundary, solve_double, solve_mixed, solve_single, solve_step3,
                     solve_with_report, terminal_boundary_values)

__all__ = [
    "ModelSpec", "ParamCurve", "PiecewiseCurve", "discount_factors", "eval_curve",
    "integrate_curve", "sigma_bar",
    "ComplexityError", "ConfigError", "ConsistencyError", "DomainError", "GridError",
    "UnsupportedRegimeError",
    "PricingResult", "american_call_single_boundary", "american_put", "d_pm", "eep_pi",
    "european_call", "european_put", "psi1_psi2",
    "RegimeSegment", "classify_point", "segment_timeline", "switch_times",
    "ExerciseBoundary", "SolveReport", "SolverConfig", "detect_events", "solve_boundary",
    "solve_call_boundary", "solve_double", "solve_mixed", "solve_single", "solve_step3",
    "solve_with_report", "terminal_boundary_values",
]
