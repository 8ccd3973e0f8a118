"""Smoothed propensity-score estimation for missing data.

Weights ``1 + (N0/N1) exp(lambda' z)`` calibrate respondents to full-sample
totals of balancing functions ``z``; the tilting parameter comes from a
convex dual solved by damped Newton.
"""

__version__ = "0.1.0"

from .calibration import SolverOptions, TiltingParams, fit_weights, solve_tilting, smoothed_weights
from .data import BalancingDesign, EstimatingFunction, MultiSample, Sample, mean_function
from .errors import InputError, NumericalError, SmoothPSError, UsageError
from .estimators import EstimateResult, estimate, sps_estimate
from .inference import bootstrap_variance, el_ratio_test, linearized_variance, sps_with_variance
from .multivariate import mv_sps_estimate
from .sdr import SDROptions, kernel_sdr
from .selection import SelectOptions, penalized_select, two_stage_sps
from .simulation import SimConfig, run_monte_carlo

__all__ = [
    "BalancingDesign", "EstimateResult", "EstimatingFunction", "InputError", "MultiSample", "NumericalError",
    "SDROptions", "Sample", "SelectOptions", "SimConfig", "SmoothPSError", "SolverOptions", "TiltingParams",
    "UsageError", "bootstrap_variance", "el_ratio_test", "estimate", "fit_weights", "kernel_sdr",
    "linearized_variance", "mean_function", "mv_sps_estimate", "penalized_select", "run_monte_carlo",
    "smoothed_weights", "solve_tilting", "sps_estimate", "sps_with_variance", "two_stage_sps",
]
