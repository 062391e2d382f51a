"""Run report schema."""

import math
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import Any, Self

from pydantic import BaseModel, Field, model_validator

from src.core.config import PROJECT_INFO
from src.schemas.model_file import FilterFile


class ExitCode(IntEnum):
    """Process exit codes of the command-line tool."""

    OK = 0
    INFEASIBLE = 2
    RECOVERY_FAILURE = 3
    USAGE = 64
    DATA_ERROR = 65
    NUMERICAL_FAILURE = 70


class ReportStatus(StrEnum):
    """Overall outcome of a command."""

    OK = "ok"
    INFEASIBLE = "infeasible"
    GAIN_EXCEEDED = "gain-exceeded"
    UNSTABLE = "unstable"
    RECOVERY_FAILURE = "recovery-failure"
    USAGE_ERROR = "usage-error"
    DATA_ERROR = "data-error"
    NUMERICAL_FAILURE = "numerical-failure"

    @property
    def exit_code(self) -> ExitCode:
        """Exit code of this status."""
        return _EXIT_CODES[self]


_EXIT_CODES = {
    ReportStatus.OK: ExitCode.OK,
    ReportStatus.INFEASIBLE: ExitCode.INFEASIBLE,
    ReportStatus.GAIN_EXCEEDED: ExitCode.INFEASIBLE,
    ReportStatus.UNSTABLE: ExitCode.INFEASIBLE,
    ReportStatus.RECOVERY_FAILURE: ExitCode.RECOVERY_FAILURE,
    ReportStatus.USAGE_ERROR: ExitCode.USAGE,
    ReportStatus.DATA_ERROR: ExitCode.DATA_ERROR,
    ReportStatus.NUMERICAL_FAILURE: ExitCode.NUMERICAL_FAILURE,
}

# worst first; a multi-stage run reports the worst stage
_SEVERITY = [
    ReportStatus.USAGE_ERROR,
    ReportStatus.DATA_ERROR,
    ReportStatus.NUMERICAL_FAILURE,
    ReportStatus.RECOVERY_FAILURE,
    ReportStatus.INFEASIBLE,
    ReportStatus.UNSTABLE,
    ReportStatus.GAIN_EXCEEDED,
    ReportStatus.OK,
]


def worst_status(*statuses: ReportStatus) -> ReportStatus:
    """The most severe of several stage outcomes."""
    return min(statuses, key=_SEVERITY.index, default=ReportStatus.OK)


def finite_or_none(value: float | None) -> float | None:
    """Map NaN and infinities to ``None`` so the report stays strict JSON."""
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _non_finite_path(value: Any, path: str) -> str | None:
    if isinstance(value, float):
        return None if math.isfinite(value) else path
    if isinstance(value, dict):
        for k, v in value.items():
            found = _non_finite_path(v, f"{path}.{k}")
            if found:
                return found
    if isinstance(value, list | tuple):
        for k, v in enumerate(value):
            found = _non_finite_path(v, f"{path}[{k}]")
            if found:
                return found
    return None


class SolverSummary(BaseModel):
    """Status and margins of one verified solve."""

    status: str = Field(..., description="Post-hoc verification outcome")
    margin: float | None = Field(..., description="Smallest slack eigenvalue over all constraints")
    iterations: int
    n_dec: int = Field(..., description="Number of scalar decision variables")
    constraints: int
    objective: float | None = None
    equality_residual: float = 0.0
    worst: list[tuple[str, float]] = Field(default_factory=list, description="Tightest constraints")
    eps: tuple[float, float] | None = Field(default=None, description="Multiplier pair of a robust solve")


class MonteCarloReport(BaseModel):
    """Gain statistics of a Monte Carlo batch."""

    runs: int
    diverged: int
    max_gain: float | None = Field(..., description="None when a run diverged")
    mean_gain: float | None
    gains: list[float | None]
    delta_frequency: float | None = Field(default=None, description="Pooled fraction of time with δ = 1")
    gamma: float | None = None
    within_gamma: bool | None = None
    traces: list[str] = Field(default_factory=list)


class StabilitySummary(BaseModel):
    """Zero-input decay check."""

    converged: bool
    ratio: float | None
    final_norm: float | None
    horizon: float


class AdmissibilityRow(BaseModel):
    """Admissibility of one rule pair (E, A_i)."""

    rule: int
    regular: bool
    impulse_free: bool
    degree: int
    rank_e: int
    admissible: bool


class RunReport(BaseModel):
    """Single JSON document describing one command run."""

    command: str
    argv: list[str] = Field(default_factory=list)
    version: str = Field(default_factory=lambda: PROJECT_INFO["version"])
    config: dict[str, Any] = Field(default_factory=dict, description="Resolved configuration")
    status: ReportStatus = ReportStatus.OK
    exit_code: int = 0
    solver: SolverSummary | None = None
    gamma: float | None = Field(default=None, description="γ* or the fixed level")
    filter: FilterFile | None = None
    monte_carlo: MonteCarloReport | None = None
    stability: StabilitySummary | None = None
    admissibility: list[AdmissibilityRow] = Field(default_factory=list)
    table: list[dict[str, Any]] = Field(default_factory=list, description="Comparison table rows")
    diagnostics: dict[str, float] = Field(default_factory=dict)
    timings: dict[str, float] = Field(default_factory=dict, description="Wall-clock seconds per stage")
    messages: list[str] = Field(default_factory=list)
    artifacts: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_finite(self) -> Self:
        """Reject NaN and infinities and keep the exit code tied to the status."""
        found = _non_finite_path(self.model_dump(mode="python"), "report")
        if found:
            msg = f"non-finite number at {found}"
            raise ValueError(msg)
        self.exit_code = int(self.status.exit_code)
        return self

    def finalize(self, status: ReportStatus | None = None, message: str | None = None) -> "RunReport":
        """Re-validated copy, optionally with a new status and an appended message."""
        data = self.model_dump()
        if status is not None:
            data["status"] = status
        if message:
            data["messages"] = [*self.messages, message]
        return RunReport.model_validate(data)

    def write(self, path: Path) -> Path:
        """Write as indented JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path
