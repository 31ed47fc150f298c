"""Stochastic averaging for scalar delay systems near a Hopf point.

Spectral reduction of the linear delay operator, closed-form averaged drift
and diffusion of the rescaled critical coordinates under fast Markov-chain
noise, simulation of both the full delay system and its planar limit
diffusion, and a statistical harness comparing the two.
"""

__version__ = "0.1.0"

from .averaged import (AveragedError, AveragedModel, CoefficientGrid,
                       QuadratureConfig)
from .config import (AssumptionError, ConfigError, ExperimentConfig,
                     load_config, validate_config)
from .dde_sim import SimConfig, ensemble, extract_rotating, simulate
from .functional_expr import (ExpressionError, ParsedFunctional,
                              UnboundedDerivativeWarning,
                              directional_derivative, parse)
from .harness import (ks_two_sample, moment_summary, moment_test, run_coeffs,
                      run_dde_ensemble, run_limit_ensemble, run_spectrum,
                      run_validation)
from .noise import MarkovNoiseModel, NoiseError, NoisePath
from .sde_sim import DiffusionSpec, euler_maruyama, sde_ensemble, sqrt_psd
from .spectral import (AdjointBasis, DelayOperator, SpectralData,
                       SpectralError, adjoint_basis, analyze, bilinear_form,
                       estimate_gap, find_critical_frequency,
                       fundamental_solution, planar_rotation, project,
                       stable_segment_table, verify_spectrum)

__all__ = [
    "__version__",
    "AveragedError", "AveragedModel", "CoefficientGrid", "QuadratureConfig",
    "AssumptionError", "ConfigError", "ExperimentConfig", "load_config",
    "validate_config",
    "SimConfig", "ensemble", "extract_rotating", "simulate",
    "ExpressionError", "ParsedFunctional", "UnboundedDerivativeWarning",
    "directional_derivative", "parse",
    "ks_two_sample", "moment_summary", "moment_test", "run_coeffs",
    "run_dde_ensemble", "run_limit_ensemble", "run_spectrum",
    "run_validation",
    "MarkovNoiseModel", "NoiseError", "NoisePath",
    "DiffusionSpec", "euler_maruyama", "sde_ensemble", "sqrt_psd",
    "AdjointBasis", "DelayOperator", "SpectralData", "SpectralError",
    "adjoint_basis", "analyze", "bilinear_form", "estimate_gap",
    "find_critical_frequency", "fundamental_solution", "planar_rotation",
    "project", "stable_segment_table", "verify_spectrum",
]
