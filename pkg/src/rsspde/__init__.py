"""Spectral-Galerkin simulation and diagnostics for regime-switching SPDEs with Levy noise."""

from .core import (
    AssumptionConstants,
    EnsembleResult,
    HybridSample,
    IntegratorFault,
    ModelSpec,
    StepControl,
    StepNoise,
    run_ensemble,
    run_trajectory,
    step,
)
from .models import PorousMediaParams, ou_model, pme_model, qmatrix_family_a, qmatrix_family_b
from .regime import RateMatrix, build_intervals, evaluate_gamma, next_switch, table_rates

__version__ = "0.1.0"
