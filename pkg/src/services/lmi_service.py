"""LMI service: error-system assembly, analysis and synthesis problems, filter recovery."""

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from src.core import matrixkit as mk
from src.core.matrixkit import BlockLayout, Matrix
from src.models.filter import ErrorSystem, FilterRealization, FilterRule, RecoveryDiagnostics
from src.models.lmi import AffineExpr, LmiProblem, Sense, Sign, VariableRegistry
from src.models.plant import FuzzyPlant, FuzzyRule, UncertaintyStructure


RECOVERY_RCOND = 1e-10
GRID_SLOTS = 8
# Γ grid slots of the delayed states and of the interval end points, per delay channel.
DELAY_SLOTS = (1, 2, 5)
BOUND_SLOTS = (3, 4, 6)


class LmiSynthesisError(Exception):
    """LMI service error."""


class MissingBoundsError(LmiSynthesisError):
    """Membership derivative bounds are missing or malformed."""


class RecoveryDegenerateError(LmiSynthesisError):
    """Filter matrices cannot be recovered from the LMI solution."""

    def __init__(self, message: str, diagnostics: dict[str, float]) -> None:
        """Record the conditioning that made recovery fail."""
        super().__init__(message)
        self.diagnostics = diagnostics


class FaultHandling(StrEnum):
    """How the sensor gain band enters synthesis."""

    NOMINAL = "nominal"
    VERTICES = "vertices"


def _uncertainty_terms(
    u: UncertaintyStructure,
    nabla: Matrix | None,
    nabla_f: Matrix | None,
) -> tuple[Matrix | None, ...]:
    eff = u.effective()
    plant_terms = (
        (eff.M @ nabla @ eff.N[0], eff.M @ nabla @ eff.N[1], eff.M_out @ nabla @ eff.N[2], eff.M_out @ nabla @ eff.N[3])
        if nabla is not None
        else (None,) * 4
    )
    filter_terms = (
        (eff.M @ nabla_f @ eff.N[4], eff.M @ nabla_f @ eff.N[5], eff.M_out @ nabla_f @ eff.N[6], eff.M_out @ nabla_f @ eff.N[7])
        if nabla_f is not None
        else (None,) * 4
    )
    return (*plant_terms, *filter_terms)


def _plus(m: Matrix, delta: Matrix | None) -> Matrix:
    return m if delta is None else m + delta


def compose_error_system(
    E: Matrix,
    E_f: Matrix,
    rule: FuzzyRule,
    frule: FilterRule,
    beta: Matrix,
    delta: float,
    *,
    expectation: bool = True,
    pair: tuple[int, int] = (0, 0),
    perturbations: Sequence[Matrix | None] | None = None,
) -> ErrorSystem:
    """Augmented error dynamics of one plant rule driving one filter rule.

    ``delta`` weighs the first delay channel and ``1 - delta`` the second.
    ``perturbations`` holds ΔA, ΔA_d, ΔE_out, ΔE_dout, ΔA_f, ΔA_τf, ΔE_f, ΔE_τf.
    """
    n, _, s, m = rule.dims
    nf, fs, fm = frule.dims
    if (fs, fm) != (s, m):
        msg = f"filter expects (s, m) = {(fs, fm)}, plant has {(s, m)}"
        raise mk.DimensionMismatchError(msg, "filter")
    if beta.shape != (s, s):
        msg = f"beta has shape {beta.shape}, expected {(s, s)}"
        raise mk.DimensionMismatchError(msg, "beta")
    d_a, d_ad, d_e, d_ed, d_af, d_atf, d_ef, d_etf = perturbations or (None,) * 8
    a = _plus(rule.A, d_a)
    a_d = _plus(rule.A_d, d_ad)
    e_out = _plus(rule.E_out, d_e)
    e_dout = _plus(rule.E_dout, d_ed)
    a_f = _plus(frule.A_f, d_af)
    a_tf = _plus(frule.A_tau_f, d_atf)
    e_f = _plus(frule.E_f_out, d_ef)
    e_tf = _plus(frule.E_tau_f_out, d_etf)

    zn = np.zeros((n, nf))
    zf = np.zeros((nf, n))
    zff = np.zeros((nf, nf))
    layout = BlockLayout((n, nf), (n, nf))
    out_layout = BlockLayout((m,), (n, nf))
    w1, w2 = delta, 1.0 - delta

    def grid(b00: Matrix, b01: Matrix, b10: Matrix, b11: Matrix) -> Matrix:
        return mk.assemble_blocks(layout, {(0, 0): b00, (0, 1): b01, (1, 0): b10, (1, 1): b11}, symmetric=False)

    def row(b0: Matrix, b1: Matrix) -> Matrix:
        return mk.assemble_blocks(out_layout, {(0, 0): b0, (0, 1): b1}, symmetric=False)

    return ErrorSystem(
        E_bar=grid(E, zn, zf, E_f),
        A=grid(a, zn, frule.B_f @ beta @ rule.C, a_f),
        A_d1=grid(w1 * a_d, zn, zf, zff),
        A_d2=grid(w2 * a_d, zn, zf, zff),
        A_tau=grid(np.zeros((n, n)), zn, zf, a_tf),
        B=np.vstack([rule.B, np.zeros((nf, rule.B.shape[1]))]),
        E=row(e_out + frule.D_f @ beta @ rule.C, -e_f),
        E_d1=row(w1 * e_dout, np.zeros((m, nf))),
        E_d2=row(w2 * e_dout, np.zeros((m, nf))),
        E_tau=row(np.zeros((m, n)), -e_tf),
        delta=delta,
        expectation=expectation,
        pair=pair,
    )


def build_error_system(
    plant: FuzzyPlant,
    filt: FilterRealization,
    pair: tuple[int, int],
    beta: ArrayLike,
    delta: float | None = None,
    *,
    nabla: Matrix | None = None,
    nabla_f: Matrix | None = None,
) -> ErrorSystem:
    """Error system for plant rule ``pair[0]`` and filter rule ``pair[1]``.

    ``delta=None`` uses the expectation δ0; 0 or 1 fixes the indicator.
    """
    i, j = pair
    if not (0 <= i < plant.rule_count and 0 <= j < filt.rule_count):
        msg = f"rule pair {pair} out of range"
        raise mk.DimensionMismatchError(msg, "pair")
    expectation = delta is None
    weight = plant.delays.delta0 if delta is None else float(delta)
    return compose_error_system(
        plant.E,
        filt.E_f,
        plant.rules[i],
        filt.rules[j],
        mk.as_matrix(beta, "beta"),
        weight,
        expectation=expectation,
        pair=pair,
        perturbations=_uncertainty_terms(plant.uncertainty, nabla, nabla_f),
    )


@dataclass(frozen=True, eq=False)
class DescriptorVariable:
    """A matrix X with ``EᵀX = XᵀE`` built in by parametrization."""

    value: AffineExpr
    gram: AffineExpr
    lyapunov: AffineExpr
    E: Matrix

    def equality_residual(self) -> AffineExpr:
        """``[[0, R], [Rᵀ, 0]]`` with the skew residual ``R = EᵀX - XᵀE`` (structurally zero)."""
        skew = (self.E.T @ self.value) - (self.value.T @ self.E)
        n = self.E.shape[0]
        return AffineExpr.assemble(BlockLayout.square((n, n)), {(0, 1): skew}, symmetric=True)


def descriptor_variable(registry: VariableRegistry, name: str, E: Matrix) -> DescriptorVariable:
    """Register X with ``EᵀX`` symmetric.

    Nonsingular E: ``X = E⁻ᵀ X̂`` with X̂ symmetric. Singular E:
    ``X = P E + V S`` with P symmetric, V spanning null(Eᵀ) and S free.
    """
    n = E.shape[0]
    if mk.numerical_rank(E) == n:
        xhat = registry.symmetric(name, n)
        return DescriptorVariable(mk.inverse(E).T @ xhat, xhat, xhat, E)
    p = registry.symmetric(f"{name}.P", n)
    v = mk.null_space(E.T)
    s = registry.general(f"{name}.S", v.shape[1], n)
    value = (p @ E) + (v @ s)
    return DescriptorVariable(value, p, p.congruence(E), E)


@dataclass(frozen=True, eq=False)
class LkfVariables:
    """Lyapunov-Krasovskii matrices; per-rule lists are indexed [channel][rule]."""

    Q: list[list[AffineExpr]]
    R: list[list[AffineExpr]]
    Z: list[list[AffineExpr]]
    M: list[list[AffineExpr]]
    S: list[AffineExpr]
    W: list[AffineExpr]
    Q4: AffineExpr
    L: list[AffineExpr]
    K: list[AffineExpr]
    N: list[AffineExpr]


def _register_lkf(reg: VariableRegistry, rules: int, size: int) -> LkfVariables:
    channels = range(1, 4)
    return LkfVariables(
        Q=[[reg.symmetric(f"Q{k}_{i}", size, Sign.PSD) for i in range(1, rules + 1)] for k in channels],
        R=[[reg.symmetric(f"R{k}_{i}", size, Sign.PSD) for i in range(1, rules + 1)] for k in channels],
        Z=[[reg.symmetric(f"Z{k}_{i}", size) for i in range(1, rules + 1)] for k in channels],
        M=[[reg.general(f"M{k}_{i}", size, size) for i in range(1, rules + 1)] for k in channels],
        S=[reg.symmetric(f"S{k}", size, Sign.PSD) for k in channels],
        W=[reg.symmetric(f"W{k}", size, Sign.PSD) for k in channels],
        Q4=reg.symmetric("Q4", size, Sign.PSD),
        L=[reg.symmetric(f"L{k}", size) for k in channels],
        K=[reg.symmetric(f"K{k}", size) for k in channels],
        N=[reg.symmetric(f"N{k}", size) for k in channels],
    )


def _rho(plant: FuzzyPlant, rho: Sequence[float] | None) -> NDArray[np.float64]:
    values = plant.membership.rho if rho is None else tuple(rho)
    if len(values) != plant.rule_count:
        msg = f"need {plant.rule_count} membership derivative bounds, got {len(values)}"
        raise MissingBoundsError(msg)
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        msg = f"membership derivative bounds must be finite and nonnegative, got {values}"
        raise MissingBoundsError(msg)
    return arr


def _abar(plant: FuzzyPlant) -> tuple[float, float, float]:
    abar = plant.delays.abar
    if min(abar) <= 0.0:
        msg = f"delay channel ranges must be positive, got {abar}"
        raise LmiSynthesisError(msg)
    return abar


def _add_side_conditions(
    problem: LmiProblem,
    lkf: LkfVariables,
    rho: NDArray[np.float64],
    abar: tuple[float, float, float],
    tag: str,
) -> None:
    """Derivative bounds on the rule-dependent LKF matrices and the Jensen couplings."""
    rules = len(lkf.Q[0])
    rho_sum = float(rho.sum())
    for k in range(3):
        qr = [lkf.Q[k][i] + lkf.R[k][i] + lkf.L[k] for i in range(rules)]
        rk = [lkf.R[k][i] + lkf.K[k] for i in range(rules)]
        zn = [lkf.Z[k][i] + lkf.N[k] for i in range(rules)]
        bound_terms = (
            ("A1", sum((rho[i] * (lkf.Q[k][i] + lkf.R[k][i]) for i in range(rules)), rho_sum * lkf.L[k]) - lkf.S[k], qr, "B1"),
            ("A2", sum((rho[i] * lkf.R[k][i] for i in range(rules)), rho_sum * lkf.K[k]) - lkf.S[k], rk, "B2"),
            ("A3", sum((rho[i] * lkf.Z[k][i] for i in range(rules)), rho_sum * lkf.N[k]) - (1.0 / abar[k]) * lkf.W[k], zn, "B3"),
        )
        for a_name, a_expr, b_exprs, b_name in bound_terms:
            problem.add(f"Gamma_{a_name}[k={k + 1}]", a_expr, Sense.NEG, tag)
            for i, b_expr in enumerate(b_exprs):
                problem.add(f"Gamma_{b_name}[k={k + 1},i={i + 1}]", b_expr, Sense.POS, tag)
        for i in range(rules):
            size = lkf.Z[k][i].shape[0]
            coupling = AffineExpr.assemble(
                BlockLayout.square((size, size)),
                {(0, 0): lkf.Z[k][i], (0, 1): lkf.M[k][i], (1, 1): lkf.Z[k][i]},
                symmetric=True,
            )
            problem.add(f"ZM[k={k + 1},i={i + 1}]", coupling, Sense.POS, tag)


@dataclass(frozen=True, eq=False)
class PairTerms:
    """Lyapunov-weighted blocks of one rule pair entering the Ξ grid.

    ``state`` maps Γ slots 0, 1, 2, 5 to ``Pᵀ𝒜_s``; ``output`` maps the same
    slots to the output rows ``ℰ_s``.
    """

    state: dict[int, AffineExpr]
    disturbance: AffineExpr
    output: dict[int, AffineExpr]
    lyapunov_sum: AffineExpr


def _gamma_sq_block(gamma_sq: float | AffineExpr, q: int) -> AffineExpr:
    if not isinstance(gamma_sq, AffineExpr):
        return AffineExpr.constant(-float(gamma_sq) * np.eye(q))
    eye = np.eye(q)
    return -sum((eye[:, [k]] @ gamma_sq @ eye[[k], :] for k in range(q)), AffineExpr.zeros(q, q))


def xi_layout(size: int, q: int, m: int) -> BlockLayout:
    """Block sizes of Ξ: eight state slots, disturbance, derivative and output."""
    return BlockLayout.square((*([size] * GRID_SLOTS), q, size, m))


def _xi(
    terms: PairTerms,
    lkf: LkfVariables,
    i: int,
    derivative: AffineExpr,
    gamma_sq: float | AffineExpr,
    e_bar: Matrix,
    abar: tuple[float, float, float],
    sigma: tuple[float, float, float],
) -> AffineExpr:
    size = e_bar.shape[0]
    q = terms.disturbance.shape[1]
    m = next(iter(terms.output.values())).shape[0]

    def cong(x: AffineExpr) -> AffineExpr:
        return x.congruence(e_bar)

    blocks: dict[tuple[int, int], AffineExpr] = {}
    g11 = derivative + terms.state[0].he() + lkf.Q4
    z_hat = AffineExpr.zeros(size, size)
    for k in range(3):
        q_k, r_k, z_k, m_k = lkf.Q[k][i], lkf.R[k][i], lkf.Z[k][i], lkf.M[k][i]
        ez = cong(z_k)
        em = e_bar.T @ m_k @ e_bar
        phi = ez - em
        g11 = g11 + q_k + r_k + abar[k] * lkf.S[k] - ez
        d, b = DELAY_SLOTS[k], BOUND_SLOTS[k]
        blocks[(0, d)] = terms.state.get(d, AffineExpr.zeros(size, size)) + phi
        blocks[(0, b)] = em
        blocks[(d, d)] = -(1.0 - sigma[k]) * q_k - 2.0 * ez + em.he()
        blocks[(d, b)] = phi
        blocks[(b, b)] = -(ez + cong(r_k))
        z_hat = z_hat + abar[k] ** 2 * z_k + 0.5 * abar[k] ** 2 * lkf.W[k]
    blocks[(0, 0)] = g11
    blocks[(7, 7)] = -lkf.Q4

    w_slot, z_slot, o_slot = GRID_SLOTS, GRID_SLOTS + 1, GRID_SLOTS + 2
    blocks[(0, w_slot)] = terms.disturbance
    blocks[(w_slot, w_slot)] = _gamma_sq_block(gamma_sq, q)
    for slot, expr in terms.state.items():
        blocks[(slot, z_slot)] = expr.T
    blocks[(w_slot, z_slot)] = terms.disturbance.T
    blocks[(z_slot, z_slot)] = (z_hat - terms.lyapunov_sum).sym()
    for slot, expr in terms.output.items():
        blocks[(slot, o_slot)] = expr.T
    blocks[(o_slot, o_slot)] = AffineExpr.constant(-np.eye(m))
    return AffineExpr.assemble(xi_layout(size, q, m), blocks, symmetric=True)


def _fuzzy_pairs(rules: int, lyapunov_rules: int) -> list[tuple[tuple[int, int], ...]]:
    """Pair groups whose summed Ξ must be negative definite."""
    if lyapunov_rules == 1:
        return [((i, 0),) for i in range(rules)]
    groups: list[tuple[tuple[int, int], ...]] = [((i, i),) for i in range(rules)]
    groups.extend(((i, j), (j, i)) for i in range(rules) for j in range(i + 1, rules))
    return groups


def _betas(plant: FuzzyPlant, handling: FaultHandling) -> list[Matrix]:
    if handling is FaultHandling.VERTICES:
        return plant.fault.vertices()
    return [plant.fault.midpoint]


def assemble_analysis(
    plant: FuzzyPlant,
    filt: FilterRealization,
    gamma: float,
    *,
    rho: Sequence[float] | None = None,
    fault_handling: FaultHandling = FaultHandling.NOMINAL,
) -> LmiProblem:
    """Analysis LMIs certifying a given filter at level ``gamma``.

    The Lyapunov matrix P_j follows the filter rule j; a one-rule filter
    therefore yields a rule-independent P and no derivative terms.
    """
    if gamma <= 0:
        msg = f"gamma must be positive, got {gamma}"
        raise LmiSynthesisError(msg)
    lyap_rules = filt.rule_count
    if lyap_rules not in (1, plant.rule_count):
        msg = f"filter has {lyap_rules} rules; expected 1 or {plant.rule_count}"
        raise LmiSynthesisError(msg)
    rho_arr = _rho(plant, rho)
    abar = _abar(plant)
    n, q, _, _ = plant.dims
    size = n + filt.order
    e_bar = mk.assemble_blocks(
        BlockLayout.square((n, filt.order)),
        {(0, 0): plant.E, (1, 1): filt.E_f},
        symmetric=False,
    )

    problem = LmiProblem(f"analysis[{plant.name}]")
    reg = problem.registry
    lyap = [descriptor_variable(reg, f"P{j + 1}", e_bar) for j in range(lyap_rules)]
    lkf = _register_lkf(reg, plant.rule_count, size)
    if lyap_rules > 1:
        x0 = reg.symmetric("X0", size)
        derivative = sum(
            (rho_arr[j] * (lyap[j].lyapunov + x0) for j in range(lyap_rules)),
            AffineExpr.zeros(size, size),
        )
    else:
        derivative = AffineExpr.zeros(size, size)

    for j, pv in enumerate(lyap):
        problem.add(f"EP_sym[{j + 1}]", pv.equality_residual(), Sense.EQ, "descriptor-lyapunov")
        problem.add(f"EP_psd[{j + 1}]", pv.gram, Sense.POS, "descriptor-lyapunov")
        if lyap_rules > 1:
            problem.add(f"EP+X0[{j + 1}]", pv.lyapunov + x0, Sense.POS, "analysis-side")
    _add_side_conditions(problem, lkf, rho_arr, abar, "analysis-side")

    sigma = plant.delays.sigma
    for v, beta in enumerate(_betas(plant, fault_handling)):
        xis: dict[tuple[int, int], AffineExpr] = {}
        for group in _fuzzy_pairs(plant.rule_count, lyap_rules):
            for i, j in group:
                if (i, j) in xis:
                    continue
                es = build_error_system(plant, filt, (i, j), beta)
                p = lyap[j].value
                terms = PairTerms(
                    state={0: p.T @ es.A, 1: p.T @ es.A_d1, 2: p.T @ es.A_d2, 5: p.T @ es.A_tau},
                    disturbance=p.T @ es.B,
                    output={
                        0: AffineExpr.constant(es.E),
                        1: AffineExpr.constant(es.E_d1),
                        2: AffineExpr.constant(es.E_d2),
                        5: AffineExpr.constant(es.E_tau),
                    },
                    lyapunov_sum=p.he(),
                )
                xis[(i, j)] = _xi(terms, lkf, i, derivative, gamma**2, e_bar, abar, sigma)
            total = sum((xis[pair] for pair in group), AffineExpr.zeros(*xis[group[0]].shape))
            label = "+".join(f"{i + 1}{j + 1}" for i, j in group)
            problem.add(f"Gamma[{label},v={v}]", total, Sense.NEG, "analysis-performance")

    problem.metadata.update(kind="analysis", gamma=gamma, q=q)
    logger.debug(f"assembled {problem.name}: {len(problem.constraints)} constraints, n_dec={reg.size}")
    return problem.freeze()


@dataclass(frozen=True, eq=False)
class SynthesisHandles:
    """Expressions needed to recover the filter from a solution point."""

    X: list[DescriptorVariable]
    Y: list[DescriptorVariable]
    A_f: list[AffineExpr]
    A_tau_f: list[AffineExpr]
    B_f: list[AffineExpr]
    E_f: list[AffineExpr]
    E_tau_f: list[AffineExpr]
    D_f: list[AffineExpr]
    E: Matrix
    gamma_sq: AffineExpr | None = None


@dataclass(frozen=True)
class RobustScalars:
    """Fixed S-procedure multipliers of the plant and filter uncertainty channels."""

    eps1: float
    eps2: float

    def __post_init__(self) -> None:
        """Both multipliers must be positive."""
        if self.eps1 <= 0 or self.eps2 <= 0:
            msg = f"eps1 and eps2 must be positive, got ({self.eps1}, {self.eps2})"
            raise LmiSynthesisError(msg)


@dataclass(frozen=True, eq=False)
class _UncertaintyCopy:
    left: AffineExpr
    right: Matrix
    eps: float
    L: Matrix


def _slot_column(parts: dict[int, AffineExpr | Matrix], layout: BlockLayout, width: int) -> AffineExpr:
    blocks = {(slot, 0): part for slot, part in parts.items()}
    col_layout = BlockLayout(layout.row_sizes, (width,))
    return AffineExpr.assemble(col_layout, blocks, symmetric=False)


def _robust_extension(
    xi: AffineExpr,
    copies: Sequence[_UncertaintyCopy],
) -> AffineExpr:
    width = copies[0].L.shape[0]
    sizes = (xi.shape[0], *([width] * (2 * len(copies))))
    blocks: dict[tuple[int, int], AffineExpr | Matrix] = {(0, 0): xi}
    for c, cp in enumerate(copies):
        a, b = 1 + 2 * c, 2 + 2 * c
        blocks[(0, a)] = cp.left
        blocks[(0, b)] = cp.right.T
        blocks[(a, a)] = -cp.eps * np.eye(width)
        blocks[(a, b)] = cp.L.T
        blocks[(b, b)] = -(1.0 / cp.eps) * np.eye(width)
    return AffineExpr.assemble(BlockLayout.square(sizes), blocks, symmetric=True)


def _synthesis_problem(
    plant: FuzzyPlant,
    gamma: float | None,
    *,
    delta0: float | None,
    fault_handling: FaultHandling,
    rho: Sequence[float] | None,
    robust: RobustScalars | None,
    mirror_filter_term: bool,
) -> LmiProblem:
    if plant.rule_count < 1:
        msg = "synthesis needs at least one rule"
        raise LmiSynthesisError(msg)
    d0 = plant.delays.delta0 if delta0 is None else float(delta0)
    if not 0.0 <= d0 <= 1.0:
        msg = f"delta0 must lie in [0, 1], got {d0}"
        raise LmiSynthesisError(msg)
    if gamma is not None and gamma <= 0:
        msg = f"gamma must be positive, got {gamma}"
        raise LmiSynthesisError(msg)
    rho_arr = _rho(plant, rho)
    abar = _abar(plant)
    n, q, s, m = plant.dims
    r = plant.rule_count
    size = 2 * n
    e = plant.E
    e_bar = np.kron(np.eye(2), e)
    w1, w2 = d0, 1.0 - d0

    kind = "robust" if robust else "synthesis"
    problem = LmiProblem(f"{kind}[{plant.name}]")
    reg = problem.registry
    xs = [descriptor_variable(reg, f"X{j + 1}", e) for j in range(r)]
    ys = [descriptor_variable(reg, f"Y{j + 1}", e) for j in range(r)]
    lkf = _register_lkf(reg, r, size)
    x0 = reg.symmetric("X0", size)
    handles = SynthesisHandles(
        X=xs,
        Y=ys,
        A_f=[reg.general(f"Af~{j + 1}", n, n) for j in range(r)],
        A_tau_f=[reg.general(f"Atf~{j + 1}", n, n) for j in range(r)],
        B_f=[reg.general(f"Bf~{j + 1}", n, s) for j in range(r)],
        E_f=[reg.general(f"Ef~{j + 1}", m, n) for j in range(r)],
        E_tau_f=[reg.general(f"Etf~{j + 1}", m, n) for j in range(r)],
        D_f=[reg.general(f"Df~{j + 1}", m, s) for j in range(r)],
        E=e,
        gamma_sq=reg.scalar("gamma_sq") if gamma is None else None,
    )
    gamma_term: float | AffineExpr = gamma**2 if gamma is not None else handles.gamma_sq  # type: ignore[assignment]
    if handles.gamma_sq is not None:
        problem.minimize(handles.gamma_sq)

    def lyap_block(j: int) -> AffineExpr:
        yv, xv = ys[j].value, xs[j].value
        return AffineExpr.assemble(
            BlockLayout.square((n, n)),
            {(0, 0): yv, (0, 1): yv, (1, 0): yv, (1, 1): xv},
            symmetric=False,
        )

    g_blocks = [lyap_block(j) for j in range(r)]
    for j in range(r):
        problem.add(f"EX_sym[{j + 1}]", xs[j].equality_residual(), Sense.EQ, "descriptor-x")
        problem.add(f"EX_psd[{j + 1}]", xs[j].gram, Sense.POS, "descriptor-x")
    for j in range(r):
        problem.add(f"EY_sym[{j + 1}]", ys[j].equality_residual(), Sense.EQ, "descriptor-y")
        problem.add(f"EY_psd[{j + 1}]", ys[j].gram, Sense.POS, "descriptor-y")
    for i in range(r):
        for j in range(r):
            problem.add(f"E(X{i + 1}-Y{j + 1})", xs[i].gram - ys[j].gram, Sense.POS, "x-over-y")
    _add_side_conditions(problem, lkf, rho_arr, abar, "synthesis-side")
    lyap_terms = [(e_bar.T @ g_blocks[j]).sym() + x0 for j in range(r)]
    for j in range(r):
        problem.add(f"EG+X0[{j + 1}]", lyap_terms[j], Sense.POS, "synthesis-lyapunov")
    derivative = sum((rho_arr[j] * lyap_terms[j] for j in range(r)), AffineExpr.zeros(size, size))

    eff = plant.uncertainty.effective()
    layout = xi_layout(size, q, m)

    def pair_terms(i: int, j: int, beta: Matrix) -> PairTerms:
        rule = plant.rules[i]
        xt, yt = xs[j].value.T, ys[j].value.T
        bcb = handles.B_f[j] @ beta @ rule.C
        x_a = xt @ rule.A + bcb
        theta1 = AffineExpr.assemble(
            BlockLayout.square((n, n)),
            {
                (0, 0): yt @ rule.A,
                (0, 1): yt @ rule.A,
                (1, 0): x_a + handles.A_f[j],
                (1, 1): x_a + handles.A_f[j] if mirror_filter_term else x_a,
            },
            symmetric=False,
        )
        theta_d = AffineExpr.assemble(
            BlockLayout.square((n, n)),
            {(0, 0): yt @ rule.A_d, (0, 1): yt @ rule.A_d, (1, 0): xt @ rule.A_d, (1, 1): xt @ rule.A_d},
            symmetric=False,
        )
        theta4 = AffineExpr.assemble(
            BlockLayout.square((n, n)),
            {(1, 0): handles.A_tau_f[j]},
            symmetric=False,
        )
        theta5 = AffineExpr.vstack([yt @ rule.B, xt @ rule.B])
        direct = rule.E_out + handles.D_f[j] @ beta @ rule.C
        f1 = AffineExpr.hstack([direct - handles.E_f[j], direct])
        f_d = np.hstack([rule.E_dout, rule.E_dout])
        f4 = AffineExpr.hstack([-handles.E_tau_f[j], np.zeros((m, n))])
        g = g_blocks[j]
        return PairTerms(
            state={0: theta1, 1: w1 * theta_d, 2: w2 * theta_d, 5: theta4},
            disturbance=theta5,
            output={
                0: f1,
                1: AffineExpr.constant(w1 * f_d),
                2: AffineExpr.constant(w2 * f_d),
                5: f4,
            },
            lyapunov_sum=g.he(),
        )

    def copies(j: int, robust: RobustScalars) -> list[_UncertaintyCopy]:
        xt, yt = xs[j].value.T, ys[j].value.T
        z_slot, o_slot = GRID_SLOTS + 1, GRID_SLOTS + 2
        m_state = AffineExpr.vstack([yt @ eff.M, xt @ eff.M])
        m_filter = AffineExpr.vstack([AffineExpr.zeros(n, eff.width), (yt - xt) @ eff.M])
        w = eff.width

        def right(parts: dict[int, Matrix]) -> Matrix:
            return mk.assemble_blocks(BlockLayout((w,), layout.col_sizes), {(0, k): v for k, v in parts.items()}, symmetric=False)

        zw = np.zeros((w, n))
        n_state = right({0: np.hstack([eff.N[0], eff.N[0]]), 1: w1 * np.hstack([eff.N[1], eff.N[1]]), 2: w2 * np.hstack([eff.N[1], eff.N[1]])})
        n_out = right({0: np.hstack([eff.N[2], eff.N[2]]), 1: w1 * np.hstack([eff.N[3], eff.N[3]]), 2: w2 * np.hstack([eff.N[3], eff.N[3]])})
        n_fstate = right({0: np.hstack([eff.N[4], zw]), 5: np.hstack([eff.N[5], zw])})
        n_fout = right({0: np.hstack([eff.N[6], zw]), 5: np.hstack([eff.N[7], zw])})
        return [
            _UncertaintyCopy(_slot_column({0: m_state, z_slot: m_state}, layout, w), n_state, robust.eps1, eff.L),
            _UncertaintyCopy(_slot_column({o_slot: AffineExpr.constant(eff.M_out)}, layout, w), n_out, robust.eps1, eff.L),
            _UncertaintyCopy(_slot_column({0: m_filter, z_slot: m_filter}, layout, w), n_fstate, robust.eps2, eff.L),
            _UncertaintyCopy(_slot_column({o_slot: AffineExpr.constant(-eff.M_out)}, layout, w), n_fout, robust.eps2, eff.L),
        ]

    tag = "robust-performance" if robust else "synthesis-performance"
    for v, beta in enumerate(_betas(plant, fault_handling)):
        for group in _fuzzy_pairs(r, r):
            parts = []
            for i, j in group:
                xi = _xi(pair_terms(i, j, beta), lkf, i, derivative, gamma_term, e_bar, abar, plant.delays.sigma)
                parts.append(_robust_extension(xi, copies(j, robust)) if robust else xi)
            total = sum(parts[1:], parts[0])
            label = "+".join(f"{i + 1}{j + 1}" for i, j in group)
            problem.add(f"Xi[{label},v={v}]", total, Sense.NEG, tag)

    problem.metadata.update(
        kind=kind,
        gamma=gamma,
        delta0=d0,
        handles=handles,
        eps=(robust.eps1, robust.eps2) if robust else None,
        mirror_filter_term=mirror_filter_term,
    )
    logger.debug(f"assembled {problem.name}: {len(problem.constraints)} constraints, n_dec={reg.size}")
    return problem.freeze()


def assemble_synthesis(
    plant: FuzzyPlant,
    gamma: float | None,
    *,
    delta0: float | None = None,
    fault_handling: FaultHandling = FaultHandling.NOMINAL,
    rho: Sequence[float] | None = None,
    mirror_filter_term: bool = False,
) -> LmiProblem:
    """Filter synthesis LMIs for the nominal plant.

    ``gamma=None`` makes γ² a decision variable and minimizes it.
    """
    return _synthesis_problem(
        plant,
        gamma,
        delta0=delta0,
        fault_handling=fault_handling,
        rho=rho,
        robust=None,
        mirror_filter_term=mirror_filter_term,
    )


def assemble_robust(
    plant: FuzzyPlant,
    gamma: float | None,
    eps1: float,
    eps2: float,
    *,
    delta0: float | None = None,
    fault_handling: FaultHandling = FaultHandling.NOMINAL,
    rho: Sequence[float] | None = None,
    mirror_filter_term: bool = False,
) -> LmiProblem:
    """Synthesis LMIs robust to the linear-fractional uncertainty at fixed ε1, ε2."""
    return _synthesis_problem(
        plant,
        gamma,
        delta0=delta0,
        fault_handling=fault_handling,
        rho=rho,
        robust=RobustScalars(eps1, eps2),
        mirror_filter_term=mirror_filter_term,
    )


@dataclass(frozen=True, eq=False)
class LinearizedFilter:
    """Linearized filter variables of one rule at a solution point."""

    A_f: Matrix
    A_tau_f: Matrix
    B_f: Matrix
    E_f: Matrix
    E_tau_f: Matrix
    D_f: Matrix


def recover_filter(
    X: ArrayLike,
    Y: ArrayLike,
    lin: LinearizedFilter,
    W: ArrayLike | None = None,
) -> tuple[FilterRule, Matrix, dict[str, float]]:
    """Undo the linearizing change of variables for one rule.

    ``I - X Y⁻¹ = Ū W``; ``W`` defaults to ``Y⁻¹`` so that ``W Y = I`` and
    ``Ū = Y - X``. The input matrices enter as ``Ūᵀ A_f W Y`` and ``Ūᵀ B_f``.
    Returns the filter rule, Ū and conditioning diagnostics.
    """
    x = mk.as_matrix(X, "X")
    y = mk.as_matrix(Y, "Y")
    n = y.shape[0]
    diag: dict[str, float] = {"cond_y": mk.condition_number(y)}
    if mk.reciprocal_condition(y) < RECOVERY_RCOND:
        msg = "Y is singular to tolerance; re-solve with a larger feasibility margin"
        raise RecoveryDegenerateError(msg, diag)
    y_inv = mk.inverse(y)
    coupling = np.eye(n) - x @ y_inv
    diag["cond_coupling"] = mk.condition_number(coupling)
    if mk.reciprocal_condition(coupling) < RECOVERY_RCOND:
        msg = "I - X Y⁻¹ is singular to tolerance; re-solve with a larger feasibility margin"
        raise RecoveryDegenerateError(msg, diag)
    w = y_inv if W is None else mk.as_matrix(W, "W")
    u_bar = coupling @ mk.inverse(w)
    wy = w @ y
    diag["cond_wy"] = mk.condition_number(wy)
    diag["cond_u"] = mk.condition_number(u_bar)
    if mk.reciprocal_condition(wy) < RECOVERY_RCOND or mk.reciprocal_condition(u_bar) < RECOVERY_RCOND:
        msg = "Ū or W·Y is singular to tolerance"
        raise RecoveryDegenerateError(msg, diag)

    def left(m: Matrix) -> Matrix:
        return mk.solve_linear(u_bar.T, m)

    def right(m: Matrix) -> Matrix:
        return mk.solve_linear(wy.T, m.T).T

    rule = FilterRule(
        A_f=right(left(lin.A_f)),
        A_tau_f=right(left(lin.A_tau_f)),
        B_f=left(lin.B_f),
        E_f_out=right(lin.E_f),
        E_tau_f_out=right(lin.E_tau_f),
        D_f=lin.D_f.copy(),
    )
    return rule, u_bar, diag


def recover_from_solution(problem: LmiProblem, x: ArrayLike) -> FilterRealization:
    """Filter realization from a solution of a synthesis or robust problem."""
    handles: SynthesisHandles | None = problem.metadata.get("handles")
    if handles is None:
        msg = f"problem {problem.name!r} carries no filter variables"
        raise LmiSynthesisError(msg)
    rules: list[FilterRule] = []
    couplings: list[Matrix] = []
    cond_y: list[float] = []
    cond_c: list[float] = []
    cond_wy: list[float] = []
    for j in range(len(handles.X)):
        lin = LinearizedFilter(
            A_f=handles.A_f[j].evaluate(x),
            A_tau_f=handles.A_tau_f[j].evaluate(x),
            B_f=handles.B_f[j].evaluate(x),
            E_f=handles.E_f[j].evaluate(x),
            E_tau_f=handles.E_tau_f[j].evaluate(x),
            D_f=handles.D_f[j].evaluate(x),
        )
        try:
            rule, u_bar, diag = recover_filter(handles.X[j].value.evaluate(x), handles.Y[j].value.evaluate(x), lin)
        except RecoveryDegenerateError as e:
            e.diagnostics["rule"] = float(j + 1)
            raise
        rules.append(rule)
        couplings.append(u_bar)
        cond_y.append(diag["cond_y"])
        cond_c.append(diag["cond_coupling"])
        cond_wy.append(diag["cond_wy"])
    gamma = problem.metadata.get("gamma")
    if gamma is None and handles.gamma_sq is not None:
        gamma = float(np.sqrt(max(handles.gamma_sq.evaluate(x)[0, 0], 0.0)))
    return FilterRealization(
        rules=tuple(rules),
        E_f=handles.E.copy(),
        coupling=tuple(couplings),
        diagnostics=RecoveryDiagnostics(tuple(cond_y), tuple(cond_c), tuple(cond_wy)),
        gamma=gamma,
    )


@dataclass(frozen=True)
class ConstraintAudit:
    """Shape summary of one constraint."""

    name: str
    provenance: str
    sense: str
    dim: int
    variable_count: int
    nonzero_coefficients: int
    symmetric: bool


@dataclass(frozen=True)
class DimensionAudit:
    """Shape summary of a whole problem."""

    n_dec: int
    constraints: list[ConstraintAudit] = field(default_factory=list)

    @property
    def all_symmetric(self) -> bool:
        """Every constraint and coefficient is bit-exactly symmetric."""
        return all(c.symmetric for c in self.constraints)

    def by_provenance(self) -> dict[str, int]:
        """Constraint count per provenance tag."""
        counts: dict[str, int] = {}
        for c in self.constraints:
            counts[c.provenance] = counts.get(c.provenance, 0) + 1
        return counts


def dimension_audit(problem: LmiProblem) -> DimensionAudit:
    """Per-constraint dimension, variable and coefficient counts."""
    entries = []
    for c in problem.constraints:
        coeffs = c.coefficients()
        entries.append(
            ConstraintAudit(
                name=c.name,
                provenance=c.provenance,
                sense=c.sense.value,
                dim=c.dim,
                variable_count=len(coeffs),
                nonzero_coefficients=int(sum(np.count_nonzero(f) for f in coeffs.values())),
                symmetric=c.expr.is_symmetric(),
            ),
        )
    return DimensionAudit(n_dec=problem.registry.size, constraints=entries)
