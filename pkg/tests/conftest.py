"""Pytest configuration and fixtures."""

import json
from pathlib import Path

import pytest

from src.models.filter import FilterRealization
from src.models.plant import FuzzyPlant
from src.services.plant_service import build_dc_motor, build_example1
from tests.plants import make_scalar_plant


@pytest.fixture
def scalar_plant() -> FuzzyPlant:
    """Stable scalar plant."""
    return make_scalar_plant()


@pytest.fixture
def zero_scalar_filter() -> FilterRealization:
    """Zero filter matching the scalar plant."""
    return FilterRealization.zero(1, 1, 1, rules=1)


@pytest.fixture
def example1_plant() -> FuzzyPlant:
    """Two-rule benchmark plant."""
    return build_example1()


@pytest.fixture
def dc_motor_plant() -> FuzzyPlant:
    """Nominal DC motor design plant."""
    return build_dc_motor().design


@pytest.fixture
def scalar_model_file(tmp_path: Path) -> Path:
    """Model file for the scalar plant with a short simulation section."""
    data = {
        "plant": {
            "name": "scalar",
            "E": [[1.0]],
            "rules": [
                {"A": [[-1.0]], "A_d": [[0.0]], "B": [[1.0]], "C": [[1.0]], "E_out": [[1.0]]},
            ],
            "membership": {
                "kind": "table",
                "rho": [0.0],
                "params": {"index": 0, "points": [-1.0, 1.0], "activations": [[1.0], [1.0]]},
            },
        },
        "delays": {
            "d_m": 0.0,
            "d_0": 0.05,
            "d_M": 0.1,
            "sigma1": 0.0,
            "sigma2": 0.0,
            "sigma3": 0.0,
            "tau_bar": 0.1,
            "delta0": 0.5,
        },
        "fault": {"beta_lower": [1.0], "beta_upper": [1.0]},
        "sim": {
            "horizon": 10.0,
            "step": 0.01,
            "runs": 3,
            "disturbance": {"kind": "pulse", "pulses": [[1.0, 2.0, 1.0]]},
        },
    }
    path = tmp_path / "scalar.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
