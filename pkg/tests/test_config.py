"""Tests for configuration settings."""

import os
from pathlib import Path
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from src.core.config import (
    PROJECT_INFO,
    Settings,
    load_project_info,
)


class TestLoadProjectInfo:
    """Tests for load_project_info function."""

    def test_load_project_info_returns_dict(self) -> None:
        """Test that load_project_info returns a TypedDict."""
        info = load_project_info()
        assert isinstance(info, dict)
        assert "name" in info
        assert "version" in info
        assert "description" in info

    def test_load_project_info_file_not_found(self, tmp_path: Path) -> None:
        """Test that FileNotFoundError is raised when pyproject.toml doesn't exist."""
        with patch("src.core.config.parent_dir", tmp_path):
            with pytest.raises(FileNotFoundError) as exc_info:
                load_project_info()
            assert "pyproject.toml not found" in str(exc_info.value)

    def test_project_name(self) -> None:
        """The package metadata names this toolkit."""
        assert PROJECT_INFO["name"] == "fuzzy-hinf-filter-synthesis"


class TestSettings:
    """Tests for Settings class."""

    def test_settings_defaults(self) -> None:
        """Solver and simulation defaults."""
        with patch.dict(os.environ, {}, clear=True):
            settings = Settings(_env_file=None)
            assert settings.margin_tol == 1e-7
            assert settings.target_margin == 1e-3
            assert settings.max_iterations == 200
            assert settings.delta_resample_interval == 0.1
            assert settings.max_trace_files == 10
            assert settings.eps_grid_exponents == [-2.0, -1.0, 0.0, 1.0, 2.0]
            assert 1 <= settings.threads <= 8

    def test_environment_override(self) -> None:
        """FHS_-prefixed variables override defaults."""
        with patch.dict(os.environ, {"FHS_THREADS": "3", "FHS_MARGIN_TOL": "1e-6"}, clear=False):
            settings = Settings(_env_file=None)
            assert settings.threads == 3
            assert settings.margin_tol == 1e-6

    def test_log_level_is_normalized(self) -> None:
        """Level names are upper-cased."""
        assert Settings(_env_file=None, log_level="debug").log_level == "DEBUG"

    def test_invalid_log_level(self) -> None:
        """Unknown level names are rejected."""
        with pytest.raises(ValidationError) as exc_info:
            Settings(_env_file=None, log_level="LOUD")
        assert "Invalid log level" in str(exc_info.value)

    @pytest.mark.parametrize(
        ("field", "value"),
        [("threads", 0), ("margin_tol", 0.0), ("max_trace_files", -1), ("blowup_cap", -1.0)],
    )
    def test_bounds(self, field: str, value: float) -> None:
        """Out-of-range values are rejected."""
        with pytest.raises(ValidationError):
            Settings(_env_file=None, **{field: value})
