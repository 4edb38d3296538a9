"""Transformation-based doubly-adaptive quasi-Milstein schemes for jump-diffusions
with discontinuous drift, plus a coupled Monte Carlo harness."""

from .exceptions import (BlowUpError, ConfigError, CouplingError, ExperimentFailure, InversionError,
                         JumpMilsteinError, ModelError, NonDegeneracyError, ParameterError,
                         RegistryError, RunawayGridError)
from .experiment import (ConvergenceReport, ExperimentConfig, coupled_sup_error, emit_report,
                         exact_sup_error, run_convergence_study, run_cost_study)
from .model import (CoefficientSet, PiecewiseSmoothFn, SdeProblem, builtin_problem, list_problems,
                    validate_assumptions)
from .noise import NoisePath, brownian_at, increment
from .schemes import (QuasiMilsteinSolver, SchemeConfig, Trajectory, evaluate_between,
                      next_grid_point, quasi_milstein_step, simulate, simulate_transformed)
from .stepsize import StepSizePolicy, compute_delta0, distance_to_theta, step_size
from .transform import (Transform, build_transform, g_apply, g_derivative, g_invert,
                        g_second_derivative, transform_coefficients)

__version__ = "0.1.0"
