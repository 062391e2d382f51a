"""Tests for closed-loop simulation, gains and Monte Carlo batches."""

import math
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid

from src.models.filter import FilterRealization
from src.models.plant import FuzzyPlant, InvalidModelError
from src.models.trace import DisturbanceSignal, SimulationTrace
from src.services import plant_service
from src.services import simulation_service as sim
from tests.plants import make_scalar_plant


class TestDisturbance:
    """Disturbance signals."""

    def test_pulse_levels(self) -> None:
        """Pulses are on between their end points."""
        signal = DisturbanceSignal.example_pulse().realize(30.0, 0.01, 1, np.random.default_rng(0))
        assert signal(4.0)[0] == 0.0
        assert signal(7.5)[0] == 1.0

    def test_overlapping_pulses(self) -> None:
        """Overlapping pulses are refused."""
        with pytest.raises(InvalidModelError):
            DisturbanceSignal.pulse([(0.0, 2.0, 1.0), (1.0, 3.0, 1.0)])

    def test_pinned_noise_seed(self) -> None:
        """A pinned seed ignores the run's generator."""
        noise = DisturbanceSignal.white_noise(0.01, seed=3)
        a = noise.realize(1.0, 0.01, 1, np.random.default_rng(1))
        b = noise.realize(1.0, 0.01, 1, np.random.default_rng(2))
        assert all(a(t)[0] == b(t)[0] for t in np.linspace(0.0, 1.0, 11))

    def test_table_and_dict(self) -> None:
        """Tables interpolate and serialize."""
        table = DisturbanceSignal.table([0.0, 1.0], [0.0, 2.0])
        assert table.realize(1.0, 0.1, 1, np.random.default_rng(0))(0.5)[0] == pytest.approx(1.0)
        assert table.to_dict() == {"kind": "table", "t": [0.0, 1.0], "values": [0.0, 2.0]}


class TestSimulate:
    """RK4 integration by the method of steps."""

    def test_fourth_order_convergence(self, scalar_plant: FuzzyPlant) -> None:
        """Halving the step shrinks the error about sixteenfold."""
        errors = []
        for h in (0.1, 0.05):
            trace = sim.simulate(scalar_plant, None, DisturbanceSignal.zero(), 2.0, h, seed=0, x0=[1.0])
            errors.append(abs(trace.x[-1, 0] - math.exp(-2.0)))
        assert errors[1] < 1e-6
        assert 8.0 <= errors[0] / errors[1] <= 32.0

    def test_pulse_gain_matches_closed_form(self, scalar_plant: FuzzyPlant) -> None:
        """A unit pulse on [0, 1] into 1/(s+1) has gain e^(-1/2)."""
        trace = sim.simulate(scalar_plant, None, DisturbanceSignal.pulse([(0.0, 1.0, 1.0)]), 10.0, 1e-3, seed=0)
        gain = sim.empirical_gain(trace)
        assert gain == pytest.approx(math.exp(-0.5), abs=1e-3)
        quadrature = math.sqrt(trapezoid(trace.v[:, 0] ** 2, trace.t) / trapezoid(trace.omega[:, 0] ** 2, trace.t))
        assert gain == pytest.approx(quadrature, rel=1e-12)

    def test_zero_filter_benchmark_gain(self, scalar_plant: FuzzyPlant, zero_scalar_filter: FilterRealization) -> None:
        """The default pulse on [5, 10] s gives a gain just below one."""
        trace = sim.simulate(scalar_plant, zero_scalar_filter, DisturbanceSignal.example_pulse(), 30.0, 0.01, seed=0)
        assert 0.85 <= sim.empirical_gain(trace) <= 0.95
        assert not np.any(trace.zf)

    def test_same_seed_same_trace(self, dc_motor_plant: FuzzyPlant) -> None:
        """Seeds fix δ(t), β and the disturbance."""
        args = (dc_motor_plant, None, DisturbanceSignal.white_noise(0.01), 0.5, 0.002)
        a = sim.simulate(*args, seed=5)
        b = sim.simulate(*args, seed=5)
        c = sim.simulate(*args, seed=6)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.delta, b.delta)
        assert not np.array_equal(a.omega, c.omega)

    def test_step_limited_by_shortest_delay(self, dc_motor_plant: FuzzyPlant) -> None:
        """Steps above d_m/4 are refused."""
        with pytest.raises(sim.SimulationError, match="d_m/4"):
            sim.simulate(dc_motor_plant, None, DisturbanceSignal.zero(), 1.0, 0.01)

    def test_singular_descriptor(self) -> None:
        """Singular E cannot be integrated explicitly."""
        plant = make_scalar_plant().with_changes(E=np.zeros((1, 1)))
        with pytest.raises(sim.SingularDescriptorError):
            sim.simulate(plant, None, DisturbanceSignal.zero(), 1.0, 0.01)

    def test_divergence(self) -> None:
        """Unstable loops stop at the blow-up cap with the crossing time."""
        with pytest.raises(sim.DivergenceError) as exc_info:
            sim.simulate(make_scalar_plant(5.0), None, DisturbanceSignal.zero(), 10.0, 0.01, x0=[1.0], blowup_cap=1e6)
        assert 0.0 < exc_info.value.time < 10.0

    def test_zero_energy_gain(self, scalar_plant: FuzzyPlant) -> None:
        """Gains need disturbance energy."""
        trace = sim.simulate(scalar_plant, None, DisturbanceSignal.zero(), 1.0, 0.01, x0=[1.0])
        with pytest.raises(sim.UndefinedGainError):
            sim.empirical_gain(trace)

    def test_prehistory_holds_start_state(self) -> None:
        """Without an initial function, delayed terms read x0 before t = 0."""
        plant = plant_service.build_example1(0.8)
        start = np.array([1.0, 1.0])
        a = sim.simulate(plant, None, DisturbanceSignal.zero(), 2.0, 0.01, seed=1, x0=start)
        b = sim.simulate(plant.with_changes(initial=start), None, DisturbanceSignal.zero(), 2.0, 0.01, seed=1)
        np.testing.assert_allclose(a.x, b.x, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.z, b.z, rtol=1e-12, atol=1e-12)


class TestTraceCsv:
    """Trace export."""

    def test_header_and_rows(self, scalar_plant: FuzzyPlant, tmp_path: Path) -> None:
        """One row per grid point under a stable header."""
        trace: SimulationTrace = sim.simulate(scalar_plant, None, DisturbanceSignal.example_pulse(), 1.0, 0.01, seed=1)
        path = trace.to_csv(tmp_path / "traces" / "run_0000.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "t,x1,xf1,delta,d_eff,tau,omega1,z1,zf1,v1,E_v,E_w"
        assert len(lines) == trace.t.size + 1


class TestMonteCarlo:
    """Seeded batches."""

    def test_batch_summary(self, scalar_plant: FuzzyPlant) -> None:
        """Every run converges below the plant's H∞ norm."""
        traces: list[SimulationTrace] = []
        summary = sim.monte_carlo(
            scalar_plant,
            None,
            DisturbanceSignal.pulse([(1.0, 2.0, 1.0)]),
            4,
            0,
            horizon=10.0,
            step=0.01,
            gamma=1.0,
            threads=2,
            traces=traces,
            trace_limit=2,
        )
        assert len(summary.gains) == 4
        assert not any(summary.diverged)
        assert summary.within_gamma is True
        assert summary.max_gain == pytest.approx(summary.mean_gain)
        assert len(traces) == 2
        assert len(set(summary.seeds)) == 4

    def test_declared_level_exceeded(self, scalar_plant: FuzzyPlant) -> None:
        """A level below the measured gain is reported."""
        summary = sim.monte_carlo(
            scalar_plant,
            None,
            DisturbanceSignal.pulse([(1.0, 2.0, 1.0)]),
            2,
            0,
            horizon=10.0,
            step=0.01,
            gamma=0.1,
        )
        assert summary.within_gamma is False

    def test_divergent_runs_are_flagged(self) -> None:
        """Diverged runs count as infinite gain instead of aborting the batch."""
        summary = sim.monte_carlo(
            make_scalar_plant(30.0),
            None,
            DisturbanceSignal.pulse([(0.0, 1.0, 1.0)]),
            2,
            0,
            horizon=2.0,
            step=0.01,
        )
        assert all(summary.diverged)
        assert summary.max_gain == math.inf
        assert len(summary.errors) == 2

    def test_runs_must_be_positive(self, scalar_plant: FuzzyPlant) -> None:
        """Empty batches are refused."""
        with pytest.raises(sim.SimulationError):
            sim.monte_carlo(scalar_plant, None, DisturbanceSignal.zero(), 0, 0, horizon=1.0, step=0.01)

    def test_run_seeds_reproducible(self) -> None:
        """Per-run seeds depend only on the base seed."""
        a = [s.generate_state(1)[0] for s in sim.run_seeds(7, 3)]
        b = [s.generate_state(1)[0] for s in sim.run_seeds(7, 3)]
        assert a == b
        assert len(set(a)) == 3


class TestStabilityProbe:
    """Zero-input decay."""

    def test_stable_plant_converges(self, scalar_plant: FuzzyPlant) -> None:
        """e^(-10) is well below the ratio threshold."""
        report = sim.stability_probe(scalar_plant, None, [1.0], 10.0)
        assert report.converged
        assert report.ratio == pytest.approx(math.exp(-10.0), rel=1e-3)

    def test_unstable_plant_does_not(self) -> None:
        """Growth is reported, not hidden."""
        report = sim.stability_probe(make_scalar_plant(0.5), None, [1.0], 10.0)
        assert not report.converged
        assert report.ratio > 1.0

    def test_zero_start(self, scalar_plant: FuzzyPlant) -> None:
        """The probe needs a nonzero start."""
        with pytest.raises(sim.SimulationError):
            sim.stability_probe(scalar_plant, None, [0.0], 1.0)

    def test_default_step(self, scalar_plant: FuzzyPlant, dc_motor_plant: FuzzyPlant) -> None:
        """d_m/4 when delays are bounded below, otherwise at most 1e-2."""
        assert sim.default_step(dc_motor_plant, 30.0) == pytest.approx(0.002)
        assert sim.default_step(scalar_plant, 0.5) == pytest.approx(0.005)
