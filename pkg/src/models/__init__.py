"""Models package."""

from src.models.filter import ErrorSystem, FilterRealization, FilterRule, RecoveryDiagnostics
from src.models.lmi import AffineExpr, LmiProblem, Sense, VariableRegistry
from src.models.plant import (
    DelayGenerator,
    DelaySpec,
    FuzzyPlant,
    FuzzyRule,
    InvalidModelError,
    MembershipModel,
    SensorFaultModel,
    UncertaintyStructure,
)
from src.models.trace import DisturbanceKind, DisturbanceSignal, SimulationTrace


__all__ = [
    "AffineExpr",
    "DelayGenerator",
    "DelaySpec",
    "DisturbanceKind",
    "DisturbanceSignal",
    "ErrorSystem",
    "FilterRealization",
    "FilterRule",
    "FuzzyPlant",
    "FuzzyRule",
    "InvalidModelError",
    "LmiProblem",
    "MembershipModel",
    "RecoveryDiagnostics",
    "Sense",
    "SensorFaultModel",
    "SimulationTrace",
    "UncertaintyStructure",
    "VariableRegistry",
]
