"""Robust output-feedback stabilization for invertible MIMO plants.

The package synthesizes and simulates stabilizers built from banks of
low-power extended high-gain observers feeding a saturated feedback law,
and numerically certifies the underlying gain design (Hurwitz structure,
bounded-real storage functions, coupling bounds, cascade thresholds).
"""

__version__ = "0.1.0"

from .control_law import (ControllerConfig, MuCertificate, estimate_mu0,
                          ideal_control, output_feedback_control,
                          perturbation_sigma, satv, satv_jacobian,
                          solve_implicit_control)
from .gain_design import (GainCertificate, build_F, design_K, gain_cascade,
                          gain_cascade_thresholds, is_hurwitz, lyapunov_solve,
                          run_design_pipeline, saturation_level)
from .normal_form import (PlantModel, PlantState, StructureIndices,
                          big_b_matrix, multiplier_vector, plant_rhs)
from .observer import (ObserverGains, ObserverState, RescaledError,
                       error_coordinates, extract_estimates, observer_rhs)
from .simulator import (IntegratorConfig, Trajectory, kappa_sweep, rk4_step,
                        simulate_closed_loop, simulate_ideal, suggest_dt)

__all__ = [
    "__version__",
    "ControllerConfig", "MuCertificate", "estimate_mu0", "ideal_control",
    "output_feedback_control", "perturbation_sigma", "satv", "satv_jacobian",
    "solve_implicit_control",
    "GainCertificate", "build_F", "design_K", "gain_cascade",
    "gain_cascade_thresholds", "is_hurwitz", "lyapunov_solve",
    "run_design_pipeline", "saturation_level",
    "PlantModel", "PlantState", "StructureIndices", "big_b_matrix",
    "multiplier_vector", "plant_rhs",
    "ObserverGains", "ObserverState", "RescaledError", "error_coordinates",
    "extract_estimates", "observer_rhs",
    "IntegratorConfig", "Trajectory", "kappa_sweep", "rk4_step",
    "simulate_closed_loop", "simulate_ideal", "suggest_dt",
]
