"""Filter realizations and the augmented filtering-error system."""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from src.core import matrixkit as mk
from src.core.matrixkit import Matrix


@dataclass(frozen=True, eq=False)
class FilterRule:
    """Per-rule filter matrices."""

    A_f: Matrix
    A_tau_f: Matrix
    B_f: Matrix
    E_f_out: Matrix
    E_tau_f_out: Matrix
    D_f: Matrix

    @property
    def dims(self) -> tuple[int, int, int]:
        """(n_f, s, m)."""
        return self.A_f.shape[0], self.B_f.shape[1], self.E_f_out.shape[0]

    def scaled(self, weight: float) -> "FilterRule":
        """Every matrix multiplied by ``weight``."""
        return FilterRule(*(weight * m for m in self.matrices()))

    def matrices(self) -> tuple[Matrix, ...]:
        """The six matrices in declaration order."""
        return (self.A_f, self.A_tau_f, self.B_f, self.E_f_out, self.E_tau_f_out, self.D_f)


@dataclass(frozen=True)
class RecoveryDiagnostics:
    """Conditioning observed while recovering each filter rule."""

    cond_y: tuple[float, ...]
    cond_coupling: tuple[float, ...]
    cond_wy: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class FilterRealization:
    """Full-order fuzzy filter.

    When ``coupling`` holds the per-rule factors Ū_j the filter is blended in
    the linearized coordinates, ``A_f(λ) = Ū(λ)⁻¹ Σ λ_j Ū_j A_fj`` and the same
    for ``A_τf`` and ``B_f``; otherwise every matrix is blended directly.
    """

    rules: tuple[FilterRule, ...]
    E_f: Matrix
    coupling: tuple[Matrix, ...] | None = None
    diagnostics: RecoveryDiagnostics | None = None
    gamma: float | None = None

    def __post_init__(self) -> None:
        """Check that all rules share dimensions."""
        if not self.rules:
            msg = "filter needs at least one rule"
            raise mk.DimensionMismatchError(msg, "filter.rules")
        dims = self.rules[0].dims
        for i, rule in enumerate(self.rules):
            if rule.dims != dims:
                msg = f"filter rule {i} has dims {rule.dims}, expected {dims}"
                raise mk.DimensionMismatchError(msg, f"filter.rules[{i}]")
        if self.E_f.shape != (dims[0], dims[0]):
            msg = f"E_f has shape {self.E_f.shape}, expected {(dims[0], dims[0])}"
            raise mk.DimensionMismatchError(msg, "filter.E_f")
        if self.coupling is not None and len(self.coupling) != len(self.rules):
            msg = "one coupling factor is needed per filter rule"
            raise mk.DimensionMismatchError(msg, "filter.coupling")

    @classmethod
    def zero(cls, n: int, s: int, m: int, rules: int = 1) -> "FilterRealization":
        """Filter whose matrices are all zero (so z_f ≡ 0)."""
        rule = FilterRule(
            np.zeros((n, n)),
            np.zeros((n, n)),
            np.zeros((n, s)),
            np.zeros((m, n)),
            np.zeros((m, n)),
            np.zeros((m, s)),
        )
        return cls(rules=(rule,) * rules, E_f=np.eye(n))

    @property
    def order(self) -> int:
        """Filter state dimension n_f."""
        return self.rules[0].dims[0]

    @property
    def rule_count(self) -> int:
        """Number of filter rules."""
        return len(self.rules)

    def blend(self, lam: ArrayLike) -> FilterRule:
        """Filter matrices at memberships ``lam``.

        A single-rule filter ignores ``lam``.
        """
        if self.rule_count == 1:
            return self.rules[0]
        weights = np.asarray(lam, dtype=np.float64).reshape(-1)
        if weights.size != self.rule_count:
            msg = f"{weights.size} memberships for a {self.rule_count}-rule filter"
            raise mk.DimensionMismatchError(msg, "filter.blend")
        direct = [
            np.tensordot(weights, np.stack(group), axes=1)
            for group in zip(*(r.matrices() for r in self.rules), strict=True)
        ]
        if self.coupling is None:
            return FilterRule(*direct)
        u = np.tensordot(weights, np.stack(self.coupling), axes=1)
        lifted = [
            np.tensordot(
                weights,
                np.stack([uj @ getattr(rule, name) for uj, rule in zip(self.coupling, self.rules, strict=True)]),
                axes=1,
            )
            for name in ("A_f", "A_tau_f", "B_f")
        ]
        a_f, a_tau_f, b_f = (mk.solve_linear(u, m) for m in lifted)
        return FilterRule(a_f, a_tau_f, b_f, direct[3], direct[4], direct[5])


@dataclass(frozen=True, eq=False)
class ErrorSystem:
    """Augmented plant-plus-filter error dynamics for one rule pair."""

    E_bar: Matrix
    A: Matrix
    A_d1: Matrix
    A_d2: Matrix
    A_tau: Matrix
    B: Matrix
    E: Matrix
    E_d1: Matrix
    E_d2: Matrix
    E_tau: Matrix
    delta: float
    expectation: bool = True
    pair: tuple[int, int] = field(default=(0, 0))

    @property
    def dim(self) -> int:
        """Augmented state dimension 2n."""
        return self.A.shape[0]

    def state_blocks(self) -> Sequence[Matrix]:
        """𝒜, 𝒜_d1, 𝒜_d2, 𝒜_τ."""
        return self.A, self.A_d1, self.A_d2, self.A_tau
