"""Tests for affine expressions, LMI assembly and filter recovery."""

import numpy as np
import pytest

from src.core import matrixkit as mk
from src.models.filter import FilterRealization
from src.models.lmi import AffineExpr, LmiProblem, RegistryFrozenError, Sense, Sign, VariableRegistry
from src.models.plant import FuzzyPlant, SensorFaultModel
from src.services import lmi_service as ls
from src.services.plant_service import build_dc_motor


class TestAffineExpr:
    """Expression algebra over registered variables."""

    def test_evaluate_general_variable(self) -> None:
        """General variables fill row-major."""
        reg = VariableRegistry()
        g = reg.general("G", 2, 2)
        x = np.arange(4.0)
        np.testing.assert_array_equal(g.evaluate(x), [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(g.he().evaluate(x), [[0.0, 3.0], [3.0, 6.0]])
        np.testing.assert_array_equal(g.T.evaluate(x), [[0.0, 2.0], [1.0, 3.0]])

    def test_matrix_products_both_sides(self) -> None:
        """ndarray @ expr and expr @ ndarray stay affine."""
        reg = VariableRegistry()
        p = reg.symmetric("P", 2)
        t = np.array([[1.0, 2.0], [0.0, 1.0]])
        x = np.array([1.0, 2.0, 3.0])
        value = p.evaluate(x)
        np.testing.assert_allclose((t @ p @ t).evaluate(x), t @ value @ t)
        np.testing.assert_allclose(p.congruence(t).evaluate(x), t.T @ value @ t)
        assert p.congruence(t).is_symmetric()

    def test_addition_merges_indices(self) -> None:
        """Sums over disjoint variables keep both."""
        reg = VariableRegistry()
        a = reg.scalar("a")
        b = reg.scalar("b")
        expr = 2.0 * a - b + np.ones((1, 1))
        assert expr.evaluate([3.0, 1.0])[0, 0] == pytest.approx(6.0)
        assert set(expr.coefficient_map()) == {0, 1}

    def test_product_of_expressions_refused(self) -> None:
        """Bilinear products are not affine."""
        reg = VariableRegistry()
        a = reg.general("A", 2, 2)
        with pytest.raises(TypeError):
            a @ a  # noqa: B018

    def test_assemble_mirrors_blocks(self) -> None:
        """Symmetric assembly mirrors off-diagonal expression blocks."""
        reg = VariableRegistry()
        g = reg.general("G", 1, 2)
        expr = AffineExpr.assemble(
            mk.BlockLayout.square((1, 2)),
            {(0, 0): -np.eye(1), (0, 1): g, (1, 1): -np.eye(2)},
            symmetric=True,
        )
        assert expr.is_symmetric()
        value = expr.evaluate([1.0, 2.0])
        np.testing.assert_array_equal(value[1:, 0], [1.0, 2.0])

    def test_stacking(self) -> None:
        """hstack and vstack accept constants and expressions."""
        reg = VariableRegistry()
        g = reg.general("G", 1, 1)
        assert AffineExpr.hstack([g, np.zeros((1, 2))]).shape == (1, 3)
        assert AffineExpr.vstack([g, np.zeros((2, 1))]).shape == (3, 1)


class TestRegistryAndProblem:
    """Variable registration and problem bookkeeping."""

    def test_sizes(self) -> None:
        """Symmetric, diagonal, general and scalar sizes add up."""
        reg = VariableRegistry()
        reg.symmetric("P", 3)
        reg.diagonal("D", 2)
        reg.general("G", 2, 3)
        reg.scalar("s")
        assert reg.size == 6 + 2 + 6 + 1
        assert "P" in reg
        assert reg.value("D", np.arange(15.0)).tolist() == [[6.0, 0.0], [0.0, 7.0]]

    def test_duplicate_and_frozen(self) -> None:
        """Names are unique and a frozen registry refuses new variables."""
        reg = VariableRegistry()
        reg.scalar("s")
        with pytest.raises(ValueError, match="duplicate"):
            reg.scalar("s")
        reg.freeze()
        with pytest.raises(RegistryFrozenError):
            reg.scalar("t")

    def test_add_rejects_asymmetric(self) -> None:
        """Constraints must be square and symmetric."""
        problem = LmiProblem("p")
        g = problem.registry.general("G", 2, 2)
        with pytest.raises(mk.DimensionMismatchError):
            problem.add("bad", g, Sense.NEG, "test")
        with pytest.raises(mk.DimensionMismatchError):
            problem.add("rect", AffineExpr.zeros(2, 3), Sense.NEG, "test")

    def test_freeze_adds_positivity(self) -> None:
        """PSD-flagged variables get their own constraint on freeze."""
        problem = LmiProblem("p")
        p = problem.registry.symmetric("P", 2, Sign.PSD)
        problem.add("P<I", p - np.eye(2), Sense.NEG, "test")
        problem.freeze()
        assert problem.by_provenance() == {"test": 1, "positivity": 1}
        with pytest.raises(RegistryFrozenError):
            problem.add("late", p, Sense.POS, "test")

    def test_margin_and_objective(self) -> None:
        """Margins are the smallest slack eigenvalue."""
        problem = LmiProblem("p")
        s = problem.registry.scalar("s")
        constraint = problem.add("s>1", s - np.eye(1), Sense.POS, "test")
        problem.minimize(s)
        problem.freeze()
        assert constraint.margin([3.0]) == pytest.approx(2.0)
        assert problem.objective_value([3.0]) == pytest.approx(3.0)

    def test_dump_lists_constraints(self) -> None:
        """The text dump names every variable and constraint."""
        problem = LmiProblem("p")
        p = problem.registry.symmetric("P", 2)
        problem.add("P>0", p, Sense.POS, "test")
        text = problem.freeze().dump()
        assert text.startswith("problem p n_dec=3")
        assert "var P symmetric 2x2" in text
        assert "constraint P>0" in text
        assert "provenance=test" in text


class TestErrorSystem:
    """Augmented error dynamics."""

    def test_zero_filter_shapes(self, example1_plant: FuzzyPlant) -> None:
        """Blocks have the augmented dimensions and the zero filter leaves z unchanged."""
        filt = FilterRealization.zero(2, 1, 1)
        es = ls.build_error_system(example1_plant, filt, (0, 0), np.eye(1))
        assert es.A.shape == (4, 4)
        assert es.expectation
        np.testing.assert_allclose(es.E, [[1.0, -0.5, 0.0, 0.0]])
        np.testing.assert_allclose(es.A_d1[:2, :2], 0.5 * example1_plant.rules[0].A_d)
        np.testing.assert_allclose(es.A_d1 + es.A_d2, np.pad(example1_plant.rules[0].A_d, ((0, 2), (0, 2))))

    def test_fixed_indicator(self, example1_plant: FuzzyPlant) -> None:
        """A fixed δ routes the delay entirely to one channel."""
        es = ls.build_error_system(example1_plant, FilterRealization.zero(2, 1, 1), (1, 0), np.eye(1), delta=1.0)
        assert not es.expectation
        assert not np.any(es.A_d2)

    def test_beta_shape_mismatch(self, example1_plant: FuzzyPlant) -> None:
        """β must be s×s."""
        with pytest.raises(mk.DimensionMismatchError):
            ls.build_error_system(example1_plant, FilterRealization.zero(2, 1, 1), (0, 0), np.eye(2))

    def test_pair_out_of_range(self, example1_plant: FuzzyPlant) -> None:
        """Rule pairs are range-checked."""
        with pytest.raises(mk.DimensionMismatchError):
            ls.build_error_system(example1_plant, FilterRealization.zero(2, 1, 1), (2, 0), np.eye(1))


class TestDescriptorVariable:
    """EᵀX = XᵀE by construction."""

    @pytest.mark.parametrize("e", [np.diag([1.0, 0.0]), np.array([[2.0, 1.0], [0.0, 1.0]])])
    def test_gram_is_symmetric(self, e: np.ndarray) -> None:
        """EᵀX is symmetric at every point."""
        reg = VariableRegistry()
        dv = ls.descriptor_variable(reg, "X", e)
        x = np.random.default_rng(1).standard_normal(reg.size)
        gram = e.T @ dv.value.evaluate(x)
        np.testing.assert_allclose(gram, gram.T, atol=1e-12)
        np.testing.assert_allclose(dv.equality_residual().evaluate(x), 0.0, atol=1e-12)


class TestAssembly:
    """Analysis, synthesis and robust problem structure."""

    def test_analysis_structure(self, example1_plant: FuzzyPlant) -> None:
        """A one-rule filter gives one Γ constraint per plant rule."""
        problem = ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1), 1.0)
        audit = ls.dimension_audit(problem)
        assert audit.all_symmetric
        counts = audit.by_provenance()
        assert counts["descriptor-lyapunov"] == 2
        assert counts["analysis-side"] == 33
        assert counts["analysis-performance"] == 2
        assert counts["positivity"] == 19
        gammas = [c for c in audit.constraints if c.provenance == "analysis-performance"]
        assert {c.dim for c in gammas} == {38}
        assert audit.n_dec == problem.registry.size > 0

    def test_side_condition_breakdown(self, example1_plant: FuzzyPlant) -> None:
        """Rate bounds summed over rules come once per k; lower bounds and couplings once per (k, i)."""
        problem = ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1), 1.0)
        names = [c.name for c in ls.dimension_audit(problem).constraints if c.provenance == "analysis-side"]
        assert sum(name.startswith("Gamma_A") for name in names) == 3 * 3
        assert sum(name.startswith("Gamma_B") for name in names) == 3 * 3 * 2
        assert sum(name.startswith("ZM[") for name in names) == 3 * 2
        assert len(names) == 33

    def test_analysis_with_rule_dependent_filter(self, example1_plant: FuzzyPlant) -> None:
        """A two-rule filter adds the cross pair and the X0 coupling."""
        problem = ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1, rules=2), 1.0)
        counts = problem.by_provenance()
        assert counts["analysis-performance"] == 3
        assert counts["analysis-side"] == 35

    def test_analysis_rejects_bad_inputs(self, example1_plant: FuzzyPlant) -> None:
        """γ must be positive and the filter rule count 1 or r."""
        with pytest.raises(ls.LmiSynthesisError):
            ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1), 0.0)
        with pytest.raises(ls.LmiSynthesisError):
            ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1, rules=3), 1.0)

    def test_missing_bounds(self, example1_plant: FuzzyPlant) -> None:
        """One derivative bound per rule is required."""
        with pytest.raises(ls.MissingBoundsError):
            ls.assemble_analysis(example1_plant, FilterRealization.zero(2, 1, 1), 1.0, rho=[1.0])

    def test_synthesis_structure(self, example1_plant: FuzzyPlant) -> None:
        """Two rules give three Ξ groups and γ² becomes the objective when free."""
        problem = ls.assemble_synthesis(example1_plant, None)
        counts = problem.by_provenance()
        assert counts["descriptor-x"] == 4
        assert counts["descriptor-y"] == 4
        assert counts["x-over-y"] == 4
        assert counts["synthesis-side"] == 33
        assert counts["synthesis-lyapunov"] == 2
        assert counts["synthesis-performance"] == 3
        assert problem.objective is not None
        assert problem.objective.size == problem.registry.size
        assert ls.dimension_audit(problem).all_symmetric

    def test_vertex_fault_handling(self, example1_plant: FuzzyPlant) -> None:
        """Each extreme sensor gain adds its own Ξ family."""
        plant = example1_plant.with_changes(fault=SensorFaultModel((0.2,), (0.8,)))
        problem = ls.assemble_synthesis(plant, 1.0, fault_handling=ls.FaultHandling.VERTICES)
        assert problem.by_provenance()["synthesis-performance"] == 6
        assert problem.objective is None

    def test_robust_extension(self) -> None:
        """Four uncertainty copies enlarge Ξ by 2·width each."""
        plant = build_dc_motor(uncertain=True).design
        problem = ls.assemble_robust(plant, 1.5, 1.0, 1.0)
        xis = [c for c in problem.constraints if c.provenance == "robust-performance"]
        assert len(xis) == 3
        assert {c.dim for c in xis} == {38 + 4 * 2 * 1}
        assert problem.metadata["eps"] == (1.0, 1.0)

    def test_robust_needs_positive_eps(self, dc_motor_plant: FuzzyPlant) -> None:
        """ε multipliers must be positive."""
        with pytest.raises(ls.LmiSynthesisError):
            ls.assemble_robust(dc_motor_plant, 1.5, 0.0, 1.0)

    def test_xi_layout(self) -> None:
        """Eight state slots plus disturbance, derivative and output."""
        assert ls.xi_layout(4, 1, 1).shape == (38, 38)


class TestRecovery:
    """Undoing the linearizing change of variables."""

    def test_round_trip(self) -> None:
        """Linearizing a random filter through Ūᵀ and recovering it is the identity."""
        rng = np.random.default_rng(42)
        n, s, m = 3, 2, 1
        for _ in range(100):
            x = rng.standard_normal((n, n))
            y = rng.standard_normal((n, n)) + 4.0 * np.eye(n)
            w = rng.standard_normal((n, n)) + 4.0 * np.eye(n)
            if abs(np.linalg.det(np.eye(n) - x @ np.linalg.inv(y))) < 1e-2:
                continue
            a_f, a_tf = rng.standard_normal((2, n, n))
            b_f = rng.standard_normal((n, s))
            e_f, e_tf = rng.standard_normal((2, m, n))
            d_f = rng.standard_normal((m, s))
            u_bar = (np.eye(n) - x @ np.linalg.inv(y)) @ np.linalg.inv(w)
            wy = w @ y
            lin = ls.LinearizedFilter(
                A_f=u_bar.T @ a_f @ wy,
                A_tau_f=u_bar.T @ a_tf @ wy,
                B_f=u_bar.T @ b_f,
                E_f=e_f @ wy,
                E_tau_f=e_tf @ wy,
                D_f=d_f,
            )
            rule, recovered_u, diag = ls.recover_filter(x, y, lin, w)
            for got, want in ((rule.A_f, a_f), (rule.A_tau_f, a_tf), (rule.B_f, b_f), (rule.E_f_out, e_f), (rule.E_tau_f_out, e_tf)):
                np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-8)
            np.testing.assert_allclose(recovered_u, u_bar, rtol=1e-8, atol=1e-10)
            assert np.isfinite(diag["cond_y"])

    def test_nonsymmetric_coupling_uses_transpose(self) -> None:
        """With Y - X nonsymmetric, A_f and B_f come back through Ūᵀ."""
        rng = np.random.default_rng(7)
        n = 3
        y = rng.standard_normal((n, n)) + 3.0 * np.eye(n)
        x = np.zeros((n, n))
        x[0, 1] = 0.5
        u_bar = y - x
        assert not np.allclose(u_bar, u_bar.T)
        a_f = rng.standard_normal((n, n))
        b_f = rng.standard_normal((n, 2))
        lin = ls.LinearizedFilter(
            A_f=u_bar.T @ a_f,
            A_tau_f=np.zeros((n, n)),
            B_f=u_bar.T @ b_f,
            E_f=np.ones((1, n)),
            E_tau_f=np.zeros((1, n)),
            D_f=np.zeros((1, 2)),
        )
        rule, recovered_u, _ = ls.recover_filter(x, y, lin)
        np.testing.assert_allclose(recovered_u, u_bar, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(rule.A_f, a_f, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(rule.B_f, b_f, rtol=1e-8, atol=1e-8)

    def test_default_w(self) -> None:
        """Without W the coupling is Y - X."""
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        y = np.array([[3.0, 0.0], [0.0, 5.0]])
        lin = ls.LinearizedFilter(np.eye(2), np.zeros((2, 2)), np.ones((2, 1)), np.ones((1, 2)), np.zeros((1, 2)), np.zeros((1, 1)))
        rule, u_bar, _ = ls.recover_filter(x, y, lin)
        np.testing.assert_allclose(u_bar, y - x)
        np.testing.assert_allclose(rule.A_f, np.linalg.inv(y - x))
        np.testing.assert_allclose(rule.E_f_out, lin.E_f)

    def test_singular_y(self) -> None:
        """A singular Y reports its conditioning."""
        lin = ls.LinearizedFilter(np.eye(2), np.eye(2), np.ones((2, 1)), np.ones((1, 2)), np.ones((1, 2)), np.zeros((1, 1)))
        with pytest.raises(ls.RecoveryDegenerateError) as exc_info:
            ls.recover_filter(np.eye(2), np.ones((2, 2)), lin)
        assert "cond_y" in exc_info.value.diagnostics

    def test_problem_without_handles(self) -> None:
        """Analysis problems carry no filter variables."""
        problem = LmiProblem("empty").freeze()
        with pytest.raises(ls.LmiSynthesisError):
            ls.recover_from_solution(problem, np.zeros(0))
