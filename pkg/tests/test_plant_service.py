"""Tests for plant models, memberships, admissibility and random draws."""

import numpy as np
import pytest

from src.core import matrixkit as mk
from src.models.plant import (
    DelayGenerator,
    DelaySpec,
    FuzzyPlant,
    InvalidModelError,
    MembershipModel,
    SensorFaultModel,
    UncertaintyStructure,
)
from src.services import plant_service as ps


class TestMemberships:
    """Normalization and blending."""

    def test_normalize_sums_to_one(self) -> None:
        """Memberships are nonnegative and sum to one."""
        lam = ps.normalize_memberships([1.0, 3.0])
        np.testing.assert_allclose(lam, [0.25, 0.75])

    @pytest.mark.parametrize("alpha", [[0.0, 0.0], [-1.0, 2.0], [np.nan, 1.0]])
    def test_degenerate_activations(self, alpha: list[float]) -> None:
        """Zero, negative or NaN activations are refused."""
        with pytest.raises(ps.DegenerateMembershipError):
            ps.normalize_memberships(alpha)

    def test_sector_square_memberships(self) -> None:
        """λ1 = x1²/9 inside the sector and clamps outside."""
        model = MembershipModel.sector_square(index=0, bound=3.0, rho=(1.0, 1.0))
        np.testing.assert_allclose(ps.normalize_memberships(model.activations([1.5, 0.0])), [0.25, 0.75])
        np.testing.assert_allclose(ps.normalize_memberships(model.activations([4.0, 0.0])), [1.0, 0.0])

    def test_table_interpolates_and_holds_ends(self) -> None:
        """Linear interpolation inside the table, end values outside."""
        model = MembershipModel.table([-2.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], rho=(1.0, 1.0))
        assert model.rule_count == 2
        np.testing.assert_allclose(model.activations([0.0]), [0.5, 0.5])
        np.testing.assert_allclose(model.activations([5.0]), [0.0, 1.0])

    def test_table_rejects_unsorted_points(self) -> None:
        """Table points must increase."""
        with pytest.raises(InvalidModelError):
            MembershipModel.table([1.0, 0.0], [[1.0], [1.0]], rho=(1.0,))

    def test_memberships_at_plant_state(self, example1_plant: FuzzyPlant) -> None:
        """Plant memberships use the plant's premise variable."""
        lam = ps.memberships_at(example1_plant, [1.0, 0.0])
        np.testing.assert_allclose(lam, [0.25, 0.75])

    def test_blend(self) -> None:
        """Blending is the weighted sum."""
        out = ps.blend([0.25, 0.75], [np.eye(2), 3 * np.eye(2)])
        np.testing.assert_allclose(out, 2.5 * np.eye(2))
        with pytest.raises(mk.DimensionMismatchError):
            ps.blend([1.0], [np.eye(2), np.eye(2)])


class TestAdmissibility:
    """Regularity and impulse-freeness of (E, A)."""

    def test_identity_descriptor(self) -> None:
        """Nonsingular E is always admissible with degree n."""
        report = ps.check_admissible(np.eye(3), -np.eye(3))
        assert report.admissible
        assert report.degree == 3
        assert report.rank_e == 3

    def test_irregular_pencil(self) -> None:
        """A pencil with a common null vector is irregular."""
        e = np.diag([1.0, 0.0])
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        report = ps.check_admissible(e, a)
        assert not report.regular
        assert report.degree == -1
        assert not report.admissible

    def test_impulsive_pencil(self) -> None:
        """A zero algebraic block gives a regular but impulsive pencil."""
        e = np.diag([1.0, 0.0])
        a = np.array([[-1.0, 1.0], [1.0, 0.0]])
        report = ps.check_admissible(e, a)
        assert report.regular
        assert not report.impulse_free

    def test_matches_block_structure_oracle(self) -> None:
        """Impulse-free exactly when the algebraic block of A is nonsingular."""
        rng = np.random.default_rng(7)
        for trial in range(40):
            n = int(rng.integers(2, 5))
            p, _ = np.linalg.qr(rng.standard_normal((n, n)))
            q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            a_tilde = rng.standard_normal((n, n))
            impulsive = trial % 2 == 0
            a_tilde[-1, -1] = 0.0 if impulsive else np.sign(rng.standard_normal()) * (0.5 + abs(rng.standard_normal()))
            if impulsive:
                # keep the pencil regular
                a_tilde[-1, 0] = 1.0
                a_tilde[0, -1] = 1.0
            e = p @ np.diag([1.0] * (n - 1) + [0.0]) @ q
            report = ps.check_admissible(e, p @ a_tilde @ q)
            assert report.rank_e == n - 1
            assert report.impulse_free is (not impulsive)

    def test_shape_mismatch(self) -> None:
        """E and A must be equal square matrices."""
        with pytest.raises(mk.DimensionMismatchError):
            ps.check_admissible(np.eye(2), np.eye(3))


class TestFaults:
    """Sensor gain bands."""

    def test_decompose(self) -> None:
        """Midpoint and half-range reconstruct the bounds."""
        model = SensorFaultModel((0.2, 1.0), (0.8, 1.0))
        mid, half = ps.fault_decompose(model)
        np.testing.assert_allclose(np.diag(mid - half), [0.2, 1.0])
        np.testing.assert_allclose(np.diag(mid + half), [0.8, 1.0])

    def test_vertices_drop_duplicates(self) -> None:
        """A degenerate channel does not double the vertex count."""
        assert len(SensorFaultModel((0.2, 1.0), (0.8, 1.0)).vertices()) == 2
        assert len(SensorFaultModel.fault_free(3).vertices()) == 1

    def test_samples_stay_in_band(self) -> None:
        """Every draw lies within its channel band."""
        model = SensorFaultModel((0.2, 0.5), (0.8, 0.5))
        for seed in range(200):
            beta = np.diag(ps.sample_fault(model, seed))
            assert 0.2 <= beta[0] <= 0.8
            assert beta[1] == 0.5

    def test_invalid_band(self) -> None:
        """Bounds outside [0, 1] name the channel."""
        with pytest.raises(InvalidModelError) as exc_info:
            SensorFaultModel((0.5,), (1.5,))
        assert exc_info.value.field_path == "fault.beta_lower[0]"


class TestDelays:
    """Delay specifications and sampled paths."""

    def test_interval_ordering(self) -> None:
        """d_0 must lie below d_M."""
        with pytest.raises(InvalidModelError):
            DelaySpec.constant(0.0, 1.0, 0.5, 1.0, 0.5)

    def test_generator_rate_checked(self) -> None:
        """A generator faster than its bound is refused."""
        with pytest.raises(InvalidModelError) as exc_info:
            DelaySpec(
                d_m=0.0,
                d_0=0.5,
                d_M=1.0,
                sigma=(0.0, 0.0, 0.0),
                tau_bar=1.0,
                delta0=0.5,
                d1=DelayGenerator(0.25, 0.1, 1.0),
                d2=DelayGenerator(0.75),
                tau=DelayGenerator(0.5),
            )
        assert exc_info.value.field_path == "delays.generators.d1"

    def test_path_stays_in_intervals(self, dc_motor_plant: FuzzyPlant) -> None:
        """Sampled delays respect their intervals and δ is binary."""
        spec = dc_motor_plant.delays
        path = ps.sample_delay_path(spec, horizon=5.0, step=0.002, seed=3)
        assert path.t.shape == path.d1.shape == path.delta.shape
        assert np.all((spec.d_m - 1e-12 <= path.d1) & (path.d1 <= spec.d_0 + 1e-12))
        assert np.all((spec.d_0 < path.d2) & (path.d2 <= spec.d_M + 1e-12))
        assert np.all((path.tau >= 0) & (path.tau <= spec.tau_bar + 1e-12))
        assert set(np.unique(path.delta)) <= {0, 1}
        np.testing.assert_allclose(path.d_eff, np.where(path.delta == 1, path.d1, path.d2))

    def test_path_is_seeded(self, dc_motor_plant: FuzzyPlant) -> None:
        """Equal seeds give equal indicator paths."""
        a = ps.sample_delay_path(dc_motor_plant.delays, 2.0, 0.002, seed=11)
        b = ps.sample_delay_path(dc_motor_plant.delays, 2.0, 0.002, seed=11)
        assert np.array_equal(a.delta, b.delta)

    def test_bad_step(self, dc_motor_plant: FuzzyPlant) -> None:
        """Nonpositive steps are refused."""
        with pytest.raises(ValueError, match="step"):
            ps.sample_delay_path(dc_motor_plant.delays, 1.0, 0.0)

    def test_bernoulli_frequency(self) -> None:
        """The indicator frequency matches delta0 within four binomial sigmas."""
        schedule = ps.BernoulliSchedule.draw(0.15, 1000.0, 0.1, np.random.default_rng(0))
        count = schedule.values.size
        assert count >= 10_000
        sigma = np.sqrt(0.15 * 0.85 / count)
        assert abs(schedule.values.mean() - 0.15) <= 4 * sigma


class TestUncertainty:
    """Linear-fractional draws."""

    @staticmethod
    def _structure(width: int = 3) -> UncertaintyStructure:
        rng = np.random.default_rng(5)
        return UncertaintyStructure(
            M=rng.standard_normal((2, width)),
            N=tuple(rng.standard_normal((width, 2)) for _ in range(8)),
            L=np.zeros((width, width)),
            M_out=np.zeros((1, width)),
        )

    def test_draws_are_contractions(self) -> None:
        """With L = 0 every draw has spectral norm at most one."""
        u = self._structure()
        for seed in range(100):
            nabla = ps.sample_uncertainty(u, seed)
            assert np.linalg.norm(nabla, 2) <= 1.0 + 1e-12

    def test_disabled_draws_zero(self) -> None:
        """A disabled structure contributes nothing."""
        u = UncertaintyStructure.disabled(2, 1, width=2)
        assert not np.any(ps.sample_uncertainty(u, 0))
        assert not np.any(u.effective().M)

    def test_ill_posed_l_refused(self) -> None:
        """I - L Lᵀ must be positive definite."""
        u = self._structure(1)
        bad = UncertaintyStructure(M=u.M, N=u.N, L=np.array([[1.0]]), M_out=u.M_out)
        with pytest.raises(InvalidModelError) as exc_info:
            bad.validate(2, 1)
        assert exc_info.value.field_path == "uncertainty.L"


class TestBundledPlants:
    """Benchmark and DC motor builders."""

    def test_example1(self, example1_plant: FuzzyPlant) -> None:
        """Two rules with identity descriptor."""
        assert example1_plant.dims == (2, 1, 1, 1)
        assert example1_plant.rule_count == 2
        assert not example1_plant.is_descriptor_singular
        assert example1_plant.delays.abar == (0.5, 1.0, 1.0)

    def test_dc_motor_variants(self) -> None:
        """Sector, companion and design plants share dimensions."""
        models = ps.build_dc_motor(uncertain=True)
        assert models.sector.dims == models.companion.dims == models.design.dims == (2, 1, 1, 1)
        assert models.design.uncertainty.enabled
        assert models.design.fault.lower == (0.5,)
        assert models.parameters.as_table()["J"] == pytest.approx(0.082)

    def test_dc_motor_amplitude_bound(self) -> None:
        """|b| above one is refused."""
        with pytest.raises(InvalidModelError):
            ps.build_dc_motor(1.5)

    def test_dc_motor_matrix_sources(self) -> None:
        """The design plant takes A from the sector models and the rest from the printed local models."""
        models = ps.build_dc_motor()
        j = models.parameters.J
        for i, rule in enumerate(models.design.rules):
            companion = models.companion.rules[i]
            np.testing.assert_allclose(rule.A, models.sector.rules[1 - i].A)
            np.testing.assert_allclose(rule.B, [[0.0], [-0.05 / j]])
            for name in ("A_d", "B", "C", "E_out", "E_dout"):
                np.testing.assert_allclose(getattr(rule, name), getattr(companion, name))
        np.testing.assert_allclose(models.sector.rules[0].B, [[0.0], [-1.0 / j]])
        assert models.design.rules[0].A[0, 0] == -4.0
        assert models.sector.rules[0].A[0, 0] == -13.0

    def test_sector_model_matches_vector_field(self) -> None:
        """Blending the sector rules with their memberships reproduces the nonlinear field."""
        sector = ps.build_dc_motor().sector
        x = np.array([1.2, -0.4])
        lam = ps.memberships_at(sector, x)
        a = ps.blend(lam, [r.A for r in sector.rules])
        np.testing.assert_allclose(a @ x, ps.dc_motor_vector_field(x), atol=1e-12)

    def test_with_changes_revalidates(self, example1_plant: FuzzyPlant) -> None:
        """Replacing fields reruns validation."""
        with pytest.raises(InvalidModelError):
            example1_plant.with_changes(E=np.eye(3))
        assert example1_plant.with_changes(name="renamed").name == "renamed"
