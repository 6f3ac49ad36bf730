"""
Services package initialization.
"""

from services.errors import (
    DownregError,
    OutOfDomain,
    DegenerateLambda,
    Unachievable,
    NumericalBlowup,
    NotConcave,
    DegenerateK,
    PitchAuthorityLost,
    DimensionMismatch,
    ConfigError,
    TableFormatError,
)
from services.aero import AeroSurface, default_surface, load_surface
from services.turbine import TurbineParams, PlantState, ActuatorCommand
from services.envelope import EnvelopeOptions, PwaEnvelope, build_envelope
from services.qp import QpProblem, QpSettings, QpSolution, QpStatus
from services.mpc import Controller, MpcConfig, Strategy, control_step

__all__ = [
    # Errors
    "DownregError",
    "OutOfDomain",
    "DegenerateLambda",
    "Unachievable",
    "NumericalBlowup",
    "NotConcave",
    "DegenerateK",
    "PitchAuthorityLost",
    "DimensionMismatch",
    "ConfigError",
    "TableFormatError",
    # Models
    "AeroSurface",
    "default_surface",
    "load_surface",
    "TurbineParams",
    "PlantState",
    "ActuatorCommand",
    "EnvelopeOptions",
    "PwaEnvelope",
    "build_envelope",
    # Control
    "QpProblem",
    "QpSettings",
    "QpSolution",
    "QpStatus",
    "Controller",
    "MpcConfig",
    "Strategy",
    "control_step",
]
