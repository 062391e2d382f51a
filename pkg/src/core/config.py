"""Configuration settings for the toolkit."""

import os
import tomllib
from pathlib import Path
from typing import TypedDict, cast

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


parent_dir = Path(__file__).resolve().parents[2]


class ProjectInfo(TypedDict):
    """Project information."""

    name: str
    version: str
    description: str


def load_project_info() -> ProjectInfo:
    """Load project metadata from pyproject.toml."""
    pyproject_path = parent_dir / "pyproject.toml"

    if not pyproject_path.exists():
        msg = f"pyproject.toml not found at {pyproject_path}"
        raise FileNotFoundError(msg)

    with pyproject_path.open("rb") as f:
        data = tomllib.load(f)

    project = cast("dict", data.get("project", {}))

    project_info: ProjectInfo = {
        "name": project.get("name", "fuzzy-hinf-filter-synthesis"),
        "version": project.get("version", "0.1.0"),
        "description": project.get(
            "description",
            "Robust H-infinity filter synthesis toolkit",
        ),
    }

    return project_info


PROJECT_INFO = load_project_info()
CURRENT_ENV = os.getenv("ENVIRONMENT", "development").lower()
env_file_path = parent_dir / f".env.{CURRENT_ENV}"


def _default_threads() -> int:
    return min(os.cpu_count() or 1, 8)


class Settings(BaseSettings):
    """Configuration settings for the toolkit.

    Every field can be overridden with an ``FHS_``-prefixed environment
    variable, e.g. ``FHS_THREADS=2``.
    """

    model_config = SettingsConfigDict(
        env_prefix="FHS_",
        env_file=env_file_path,
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    environment: str = Field(default=CURRENT_ENV)
    log_level: str = Field(default="INFO")

    threads: int = Field(
        default_factory=_default_threads,
        ge=1,
        description="Upper bound on worker threads for Monte Carlo and grid fan-out",
    )

    margin_tol: float = Field(
        default=1e-7,
        gt=0,
        description="Smallest slack eigenvalue accepted as strict feasibility",
    )
    step_tol: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=200, ge=1)
    target_margin: float = Field(
        default=1e-3,
        gt=0,
        description="Margin at which the max-margin phase stops early",
    )
    feasibility_radius: float = Field(default=1e6, gt=0)
    eps_grid_exponents: list[float] = Field(
        default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0],
    )

    delta_resample_interval: float = Field(
        default=0.1,
        gt=0,
        description="Seconds between independent draws of the Bernoulli delay indicator",
    )
    white_noise_power: float = Field(default=0.01, ge=0)
    blowup_cap: float = Field(default=1e9, gt=0)
    max_trace_files: int = Field(
        default=10,
        ge=0,
        description="Trace CSVs kept per Monte Carlo batch unless --traces says otherwise",
    )
    default_rho: float = Field(default=100.0, ge=0)

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate the loguru level name."""
        level = str(v).upper()
        if level not in {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR"}:
            msg = f"Invalid log level: {v}"
            raise ValueError(msg)
        return level


settings = Settings()
