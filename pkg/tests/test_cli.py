"""Tests for CLI commands."""

import json
import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
import typer
from typer.testing import CliRunner

from src.cli import app, main, parse_eps_spec
from src.core.config import PROJECT_INFO
from src.models.filter import FilterRealization
from src.schemas.model_file import FilterFile
from src.services.pipeline_service import UsageError
from src.services.solver_service import SolveResult, SolveStatus


runner = CliRunner()


def _report(out: Path, command: str) -> dict:
    return json.loads((out / f"{command}_report.json").read_text(encoding="utf-8"))


@pytest.fixture
def scalar_filter_file(tmp_path: Path) -> Path:
    """Zero filter for the scalar plant, declared at level 1.5."""
    file = FilterFile.from_realization(FilterRealization.zero(1, 1, 1))
    file.gamma = 1.5
    return file.write(tmp_path / "zero_filter.json")


class TestValidate:
    """The validate command."""

    def test_bundled_model(self, tmp_path: Path) -> None:
        """A bundled name validates and writes a report."""
        result = runner.invoke(app, ["--out", str(tmp_path), "validate", "example1"])
        assert result.exit_code == 0, result.output
        report = _report(tmp_path, "validate")
        assert report["status"] == "ok"
        assert len(report["admissibility"]) == 2

    def test_missing_file_is_usage_error(self, tmp_path: Path) -> None:
        """Unknown paths exit with 64."""
        result = runner.invoke(app, ["--out", str(tmp_path), "validate", str(tmp_path / "nope.json")])
        assert result.exit_code == 64
        assert _report(tmp_path, "validate")["status"] == "usage-error"

    def test_invalid_model_is_data_error(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """Schema violations exit with 65."""
        data = json.loads(scalar_model_file.read_text(encoding="utf-8"))
        data["plant"]["rules"][0]["A"] = [[1.0, 2.0]]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(data), encoding="utf-8")
        result = runner.invoke(app, ["--out", str(tmp_path), "validate", str(bad)])
        assert result.exit_code == 65
        assert _report(tmp_path, "validate")["status"] == "data-error"


class TestSimulate:
    """The simulate command."""

    def test_zero_filter_batch(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """Without a filter the error output is z; traces are written."""
        out = tmp_path / "out"
        result = runner.invoke(app, ["--out", str(out), "--traces", "1", "simulate", str(scalar_model_file)])
        assert result.exit_code == 0, result.output
        report = _report(out, "simulate")
        assert report["monte_carlo"]["runs"] == 3
        assert report["monte_carlo"]["diverged"] == 0
        assert report["stability"]["converged"] is True
        assert len(list((out / "traces").glob("run_*.csv"))) == 1

    def test_gain_above_declared_level(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """A level below the measured gain exits with 2."""
        result = runner.invoke(app, ["--out", str(tmp_path), "simulate", str(scalar_model_file), "--gamma", "0.1"])
        assert result.exit_code == 2
        assert _report(tmp_path, "simulate")["status"] == "gain-exceeded"

    def test_same_seed_same_gains(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """Reports of equal seeds agree."""
        gains = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            runner.invoke(app, ["--out", str(out), "--seed", "4", "simulate", str(scalar_model_file), "--runs", "2"])
            gains.append(_report(out, "simulate")["monte_carlo"]["gains"])
        assert gains[0] == gains[1]


class TestVerify:
    """The verify command with the solver stubbed out."""

    @staticmethod
    def _result(status: SolveStatus, margin: float) -> SolveResult:
        return SolveResult(status=status, x=np.zeros(1), margin=margin, margins={"Gamma[11,v=0]": margin}, iterations=4)

    def test_certified(self, tmp_path: Path, scalar_model_file: Path, scalar_filter_file: Path) -> None:
        """A feasible analysis problem exits with 0 at the filter's own level."""
        with patch(
            "src.services.pipeline_service.LmiSolver.solve_feasibility",
            return_value=self._result(SolveStatus.FEASIBLE, 1e-3),
        ) as mock_solve:
            result = runner.invoke(app, ["--out", str(tmp_path), "verify", str(scalar_model_file), str(scalar_filter_file)])
        assert result.exit_code == 0, result.output
        mock_solve.assert_called_once()
        report = _report(tmp_path, "verify")
        assert report["gamma"] == 1.5
        assert report["solver"]["status"] == "feasible"

    def test_problem_listing_written(self, tmp_path: Path, scalar_model_file: Path, scalar_filter_file: Path) -> None:
        """The assembled analysis LMIs are dumped as an artifact."""
        with patch(
            "src.services.pipeline_service.LmiSolver.solve_feasibility",
            return_value=self._result(SolveStatus.FEASIBLE, 1e-3),
        ):
            runner.invoke(app, ["--out", str(tmp_path), "verify", str(scalar_model_file), str(scalar_filter_file)])
        listing = tmp_path / "verify_problem.txt"
        assert listing.is_file()
        text = listing.read_text(encoding="utf-8")
        assert text.startswith("problem ")
        assert "provenance=analysis-side" in text
        assert str(listing) in _report(tmp_path, "verify")["artifacts"]

    def test_not_certified(self, tmp_path: Path, scalar_model_file: Path, scalar_filter_file: Path) -> None:
        """An infeasible analysis problem exits with 2."""
        with patch(
            "src.services.pipeline_service.LmiSolver.solve_feasibility",
            return_value=self._result(SolveStatus.INFEASIBLE, -0.2),
        ):
            result = runner.invoke(
                app,
                ["--out", str(tmp_path), "verify", str(scalar_model_file), str(scalar_filter_file), "--gamma", "0.5"],
            )
        assert result.exit_code == 2
        assert _report(tmp_path, "verify")["gamma"] == 0.5

    def test_missing_filter(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """A missing filter file is a usage error."""
        result = runner.invoke(app, ["--out", str(tmp_path), "verify", str(scalar_model_file), str(tmp_path / "f.json")])
        assert result.exit_code == 64


class TestExampleAndEntryPoint:
    """Bundled examples, options and the console entry point."""

    def test_unknown_example(self, tmp_path: Path) -> None:
        """Only the bundled examples are accepted."""
        result = runner.invoke(app, ["--out", str(tmp_path), "example", "example3"])
        assert result.exit_code == 64

    def test_unknown_design(self, tmp_path: Path, scalar_model_file: Path) -> None:
        """The design switch is checked before any solve."""
        result = runner.invoke(app, ["--out", str(tmp_path), "synth", str(scalar_model_file), "--design", "fancy"])
        assert result.exit_code == 64

    def test_version(self) -> None:
        """--version prints the package version."""
        result = runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert PROJECT_INFO["version"] in result.output

    def test_main_usage_error(self) -> None:
        """Unknown options exit with 64 from the console entry point."""
        with patch.object(sys, "argv", ["fhs", "--bogus"]), pytest.raises(SystemExit) as exc_info:
            main()
        assert exc_info.value.code == 64

    def test_main_usage_error_from_typer_click(self) -> None:
        """Usage errors of the click that typer ships also exit with 64."""
        with (
            patch("src.cli.app", side_effect=typer.BadParameter("bad value")),
            pytest.raises(SystemExit) as exc_info,
        ):
            main()
        assert exc_info.value.code == 64

    def test_main_passes_exit_code(self, tmp_path: Path) -> None:
        """Command exit codes reach the process."""
        with patch.object(sys, "argv", ["fhs", "--out", str(tmp_path), "example", "nope"]), pytest.raises(SystemExit) as exc_info:
            main()
        assert exc_info.value.code == 64

    @pytest.mark.parametrize(
        ("spec", "expected"),
        [(None, None), ("-2:2", [-2.0, -1.0, 0.0, 1.0, 2.0]), ("-1,0.5", [-1.0, 0.5])],
    )
    def test_parse_eps_spec(self, spec: str | None, expected: list[float] | None) -> None:
        """Comma lists and inclusive integer ranges."""
        assert parse_eps_spec(spec) == expected

    def test_parse_eps_spec_rejects_garbage(self) -> None:
        """Malformed grids are usage errors."""
        with pytest.raises(UsageError):
            parse_eps_spec("a:b")
