"""Velocity decomposition and estimation for rectified-flow sampling."""

__version__ = "0.1.0"

from .decomposition import Decomposition, decompose, recompose
from .estimator import (AnchorHistory, SamplingSchedule, StablePhaseConfig, StepMode,
                        detect_stable_phase, estimate_velocity, extrapolate_coefficients,
                        plan_schedule)
from .fields import ConstantField, ControlledField, GaussianAnalyticField, MlpField
from .flow_core import Latent, TimeGrid, interpolate
from .sampler import record_component_dynamics, sample_full, sample_vde

__all__ = [
    "AnchorHistory", "ConstantField", "ControlledField", "Decomposition",
    "GaussianAnalyticField", "Latent", "MlpField", "SamplingSchedule",
    "StablePhaseConfig", "StepMode", "TimeGrid", "decompose", "detect_stable_phase",
    "estimate_velocity", "extrapolate_coefficients", "interpolate", "plan_schedule",
    "recompose", "record_component_dynamics", "sample_full", "sample_vde",
]
