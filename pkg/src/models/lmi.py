"""Decision-variable registry and affine matrix expressions for LMI problems."""

from collections import Counter
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.core import matrixkit as mk
from src.core.matrixkit import BlockLayout, Matrix


Indices = NDArray[np.int64]


class VariableShape(StrEnum):
    """Shape class of a decision variable."""

    SYMMETRIC = "symmetric"
    GENERAL = "general"
    DIAGONAL = "diagonal"
    SCALAR = "scalar"


class Sign(StrEnum):
    """Sign requirement attached to a decision variable."""

    FREE = "free"
    PSD = "psd"


class Sense(StrEnum):
    """Sense of an affine matrix constraint."""

    NEG = "<0"
    POS = ">0"
    EQ = "=0"


class RegistryFrozenError(RuntimeError):
    """A variable was added after the registry was frozen."""


@dataclass(frozen=True, eq=False)
class AffineExpr:
    """Matrix-valued affine function ``const + Σ x[indices[k]] · coefs[k]``."""

    const: Matrix
    indices: Indices
    coefs: NDArray[np.float64]

    __array_ufunc__ = None

    @classmethod
    def constant(cls, value: ArrayLike) -> "AffineExpr":
        """Expression with no decision variables."""
        c = np.atleast_2d(np.asarray(value, dtype=np.float64))
        return cls(c, np.zeros(0, dtype=np.int64), np.zeros((0, *c.shape)))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "AffineExpr":
        """All-zero expression."""
        return cls.constant(np.zeros((rows, cols)))

    @property
    def shape(self) -> tuple[int, int]:
        """Matrix shape."""
        return self.const.shape[0], self.const.shape[1]

    @property
    def T(self) -> "AffineExpr":  # noqa: N802
        """Transpose."""
        return AffineExpr(self.const.T, self.indices, self.coefs.transpose(0, 2, 1))

    def evaluate(self, x: ArrayLike) -> Matrix:
        """Value at the decision point ``x``."""
        if self.indices.size == 0:
            return self.const.copy()
        xv = np.asarray(x, dtype=np.float64)[self.indices]
        return self.const + np.tensordot(xv, self.coefs, axes=1)

    def coefficient_map(self) -> dict[int, Matrix]:
        """Nonzero coefficient matrices keyed by scalar variable index."""
        return {
            int(k): c
            for k, c in zip(self.indices, self.coefs, strict=True)
            if np.any(c != 0.0)
        }

    def is_symmetric(self, tol: float = 0.0) -> bool:
        """Exact (``tol = 0``) or approximate symmetry of every term."""
        if self.shape[0] != self.shape[1]:
            return False
        if tol == 0.0:
            return bool(
                np.array_equal(self.const, self.const.T)
                and np.array_equal(self.coefs, self.coefs.transpose(0, 2, 1)),
            )
        scale = tol * max(1.0, float(np.max(np.abs(self.const), initial=0.0)))
        return bool(
            np.all(np.abs(self.const - self.const.T) <= scale)
            and np.all(np.abs(self.coefs - self.coefs.transpose(0, 2, 1)) <= scale),
        )

    def sym(self) -> "AffineExpr":
        """Symmetric part ``(F + Fᵀ)/2``, bit-exactly symmetric."""
        return AffineExpr(
            (self.const + self.const.T) / 2.0,
            self.indices,
            (self.coefs + self.coefs.transpose(0, 2, 1)) / 2.0,
        )

    def he(self) -> "AffineExpr":
        """Hermitian sum ``F + Fᵀ``."""
        return AffineExpr(
            self.const + self.const.T,
            self.indices,
            self.coefs + self.coefs.transpose(0, 2, 1),
        )

    def congruence(self, t: ArrayLike) -> "AffineExpr":
        """``Tᵀ F T`` symmetrized."""
        tm = np.asarray(t, dtype=np.float64)
        return (tm.T @ self @ tm).sym()

    def _coerce(self, other: "AffineExpr | ArrayLike") -> "AffineExpr":
        if isinstance(other, AffineExpr):
            return other
        arr = np.asarray(other, dtype=np.float64)
        if arr.ndim == 0:
            if float(arr) != 0.0:
                msg = "only zero scalars can be added to a matrix expression"
                raise TypeError(msg)
            return AffineExpr.zeros(*self.shape)
        return AffineExpr.constant(arr)

    def __add__(self, other: "AffineExpr | ArrayLike") -> "AffineExpr":
        o = self._coerce(other)
        if o.shape != self.shape:
            msg = f"cannot add {self.shape} and {o.shape} expressions"
            raise mk.DimensionMismatchError(msg, "add")
        if o.indices.size == 0:
            return AffineExpr(self.const + o.const, self.indices, self.coefs)
        if self.indices.size == 0:
            return AffineExpr(self.const + o.const, o.indices, o.coefs)
        merged = np.union1d(self.indices, o.indices)
        coefs = np.zeros((merged.size, *self.shape))
        coefs[np.searchsorted(merged, self.indices)] += self.coefs
        coefs[np.searchsorted(merged, o.indices)] += o.coefs
        return AffineExpr(self.const + o.const, merged, coefs)

    def __radd__(self, other: "AffineExpr | ArrayLike") -> "AffineExpr":
        return self.__add__(other)

    def __neg__(self) -> "AffineExpr":
        return AffineExpr(-self.const, self.indices, -self.coefs)

    def __sub__(self, other: "AffineExpr | ArrayLike") -> "AffineExpr":
        return self + (-self._coerce(other))

    def __rsub__(self, other: "AffineExpr | ArrayLike") -> "AffineExpr":
        return self._coerce(other) + (-self)

    def __mul__(self, scalar: float) -> "AffineExpr":
        s = float(scalar)
        return AffineExpr(s * self.const, self.indices, s * self.coefs)

    def __rmul__(self, scalar: float) -> "AffineExpr":
        return self.__mul__(scalar)

    def __matmul__(self, other: ArrayLike) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            msg = "product of two decision-dependent expressions is not affine"
            raise TypeError(msg)
        m = np.atleast_2d(np.asarray(other, dtype=np.float64))
        if m.shape[0] != self.shape[1]:
            msg = f"cannot multiply {self.shape} expression by {m.shape} matrix"
            raise mk.DimensionMismatchError(msg, "matmul")
        return AffineExpr(self.const @ m, self.indices, self.coefs @ m)

    def __rmatmul__(self, other: ArrayLike) -> "AffineExpr":
        m = np.atleast_2d(np.asarray(other, dtype=np.float64))
        if m.shape[1] != self.shape[0]:
            msg = f"cannot multiply {m.shape} matrix by {self.shape} expression"
            raise mk.DimensionMismatchError(msg, "matmul")
        return AffineExpr(m @ self.const, self.indices, m @ self.coefs)

    @classmethod
    def assemble(
        cls,
        layout: BlockLayout,
        blocks: Mapping[tuple[int, int], "AffineExpr | ArrayLike"],
        *,
        symmetric: bool,
    ) -> "AffineExpr":
        """Block assembly with the same slot rules as :func:`matrixkit.assemble_blocks`.

        Diagonal blocks in symmetric mode may carry rounding asymmetry up to
        1e-12 relative; they are symmetrized on placement.
        """
        if symmetric and layout.row_sizes != layout.col_sizes:
            msg = "symmetric assembly needs identical row and column partitions"
            raise mk.DimensionMismatchError(msg, "layout")
        exprs: dict[tuple[int, int], AffineExpr] = {}
        for (r, c), value in blocks.items():
            slot = f"({r},{c})"
            if not (0 <= r < len(layout.row_sizes) and 0 <= c < len(layout.col_sizes)):
                msg = f"block slot {slot} outside layout"
                raise mk.DimensionMismatchError(msg, slot)
            expr = value if isinstance(value, AffineExpr) else cls.constant(value)
            expected = (layout.row_sizes[r], layout.col_sizes[c])
            if expr.shape != expected:
                msg = f"block {slot} has shape {expr.shape}, slot expects {expected}"
                raise mk.DimensionMismatchError(msg, slot)
            if symmetric and r > c:
                msg = f"block {slot} is below the diagonal; give the upper block"
                raise mk.DimensionMismatchError(msg, slot)
            if symmetric and r == c:
                if not expr.is_symmetric(tol=1e-12):
                    msg = f"diagonal block {slot} is not symmetric"
                    raise mk.DimensionMismatchError(msg, slot)
                expr = expr.sym()
            exprs[(r, c)] = expr

        const = mk.assemble_blocks(
            layout,
            {slot: e.const for slot, e in exprs.items()},
            symmetric=symmetric,
        )
        parts = [e.indices for e in exprs.values()]
        merged = np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
        coefs = np.zeros((merged.size, *layout.shape))
        rows, cols = layout.row_offsets(), layout.col_offsets()
        for (r, c), e in exprs.items():
            if e.indices.size == 0:
                continue
            pos = np.searchsorted(merged, e.indices)
            r0, c0 = rows[r], cols[c]
            h, w = e.shape
            coefs[pos, r0 : r0 + h, c0 : c0 + w] += e.coefs
            if symmetric and r != c:
                coefs[pos, c0 : c0 + w, r0 : r0 + h] += e.coefs.transpose(0, 2, 1)
        return cls(const, merged.astype(np.int64), coefs)

    @classmethod
    def hstack(cls, parts: Sequence["AffineExpr | ArrayLike"]) -> "AffineExpr":
        """Horizontal concatenation."""
        exprs = [p if isinstance(p, AffineExpr) else cls.constant(p) for p in parts]
        layout = BlockLayout((exprs[0].shape[0],), tuple(e.shape[1] for e in exprs))
        return cls.assemble(layout, {(0, k): e for k, e in enumerate(exprs)}, symmetric=False)

    @classmethod
    def vstack(cls, parts: Sequence["AffineExpr | ArrayLike"]) -> "AffineExpr":
        """Vertical concatenation."""
        exprs = [p if isinstance(p, AffineExpr) else cls.constant(p) for p in parts]
        layout = BlockLayout(tuple(e.shape[0] for e in exprs), (exprs[0].shape[1],))
        return cls.assemble(layout, {(k, 0): e for k, e in enumerate(exprs)}, symmetric=False)


@dataclass(frozen=True)
class DecisionVariable:
    """A named block of scalar decision variables."""

    name: str
    shape: VariableShape
    rows: int
    cols: int
    offset: int
    sign: Sign = Sign.FREE

    @property
    def size(self) -> int:
        """Number of scalar unknowns."""
        match self.shape:
            case VariableShape.SYMMETRIC:
                return self.rows * (self.rows + 1) // 2
            case VariableShape.DIAGONAL:
                return self.rows
            case VariableShape.SCALAR:
                return 1
            case VariableShape.GENERAL:
                return self.rows * self.cols

    @property
    def slice(self) -> slice:
        """Slice of the global decision vector."""
        return slice(self.offset, self.offset + self.size)


def _basis(var: DecisionVariable) -> NDArray[np.float64]:
    n, m = var.rows, var.cols
    out = np.zeros((var.size, n, m))
    match var.shape:
        case VariableShape.SYMMETRIC:
            rr, cc = np.tril_indices(n)
            k = np.arange(var.size)
            out[k, rr, cc] = 1.0
            out[k, cc, rr] = 1.0
        case VariableShape.DIAGONAL:
            k = np.arange(n)
            out[k, k, k] = 1.0
        case VariableShape.SCALAR:
            out[0, 0, 0] = 1.0
        case VariableShape.GENERAL:
            rr, cc = np.unravel_index(np.arange(var.size), (n, m))
            out[np.arange(var.size), rr, cc] = 1.0
    return out


class VariableRegistry:
    """Ordered, name-unique collection of decision variables."""

    def __init__(self) -> None:
        """Start empty and unfrozen."""
        self._vars: dict[str, DecisionVariable] = {}
        self._size = 0
        self._frozen = False

    def _add(
        self,
        name: str,
        shape: VariableShape,
        rows: int,
        cols: int,
        sign: Sign,
    ) -> AffineExpr:
        if self._frozen:
            msg = f"registry is frozen; cannot add {name!r}"
            raise RegistryFrozenError(msg)
        if name in self._vars:
            msg = f"duplicate decision variable {name!r}"
            raise ValueError(msg)
        if rows < 1 or cols < 1:
            msg = f"variable {name!r} needs positive dimensions"
            raise ValueError(msg)
        var = DecisionVariable(name, shape, rows, cols, self._size, sign)
        self._vars[name] = var
        self._size += var.size
        return AffineExpr(
            np.zeros((rows, cols)),
            np.arange(var.offset, var.offset + var.size, dtype=np.int64),
            _basis(var),
        )

    def symmetric(self, name: str, n: int, sign: Sign = Sign.FREE) -> AffineExpr:
        """Register an n×n symmetric matrix."""
        return self._add(name, VariableShape.SYMMETRIC, n, n, sign)

    def general(self, name: str, rows: int, cols: int) -> AffineExpr:
        """Register an unstructured rows×cols matrix."""
        return self._add(name, VariableShape.GENERAL, rows, cols, Sign.FREE)

    def diagonal(self, name: str, n: int, sign: Sign = Sign.FREE) -> AffineExpr:
        """Register an n×n diagonal matrix."""
        return self._add(name, VariableShape.DIAGONAL, n, n, sign)

    def scalar(self, name: str, sign: Sign = Sign.FREE) -> AffineExpr:
        """Register a scalar, returned as a 1×1 expression."""
        return self._add(name, VariableShape.SCALAR, 1, 1, sign)

    def freeze(self) -> None:
        """Fix the variable list."""
        self._frozen = True

    @property
    def frozen(self) -> bool:
        """Whether variables can still be added."""
        return self._frozen

    @property
    def size(self) -> int:
        """Total scalar dimension N_dec."""
        return self._size

    def __len__(self) -> int:
        return len(self._vars)

    def __iter__(self) -> Iterator[DecisionVariable]:
        return iter(self._vars.values())

    def __contains__(self, name: object) -> bool:
        return name in self._vars

    def __getitem__(self, name: str) -> DecisionVariable:
        return self._vars[name]

    def expr(self, name: str) -> AffineExpr:
        """The affine expression of a registered variable."""
        var = self._vars[name]
        return AffineExpr(
            np.zeros((var.rows, var.cols)),
            np.arange(var.offset, var.offset + var.size, dtype=np.int64),
            _basis(var),
        )

    def value(self, name: str, x: ArrayLike) -> Matrix:
        """Matrix value of one variable at point ``x``."""
        var = self._vars[name]
        chunk = np.asarray(x, dtype=np.float64)[var.slice]
        return np.tensordot(chunk, _basis(var), axes=1)

    def values(self, x: ArrayLike) -> dict[str, Matrix]:
        """All variable values at point ``x``."""
        return {name: self.value(name, x) for name in self._vars}


@dataclass(frozen=True, eq=False)
class AffineConstraint:
    """``F0 + Σ x_k F_k`` constrained to be ≺ 0, ≻ 0 or = 0."""

    name: str
    sense: Sense
    expr: AffineExpr
    provenance: str

    @property
    def dim(self) -> int:
        """Side of the (square) constraint matrix."""
        return self.expr.shape[0]

    @property
    def F0(self) -> Matrix:  # noqa: N802
        """Constant block."""
        return self.expr.const

    def coefficients(self) -> dict[int, Matrix]:
        """Nonzero coefficient matrices by scalar index."""
        return self.expr.coefficient_map()

    def value(self, x: ArrayLike) -> Matrix:
        """Constraint matrix at ``x``."""
        return self.expr.evaluate(x)

    def slack(self, x: ArrayLike) -> Matrix:
        """Sign-normalized value: ≻ 0 exactly when the constraint is strict-feasible."""
        v = self.value(x)
        return -v if self.sense is Sense.NEG else v

    def margin(self, x: ArrayLike) -> float:
        """Smallest slack eigenvalue (or minus the largest residual entry for equalities)."""
        if self.sense is Sense.EQ:
            return -float(np.max(np.abs(self.value(x)), initial=0.0))
        return mk.min_eig(self.slack(x))


class LmiProblem:
    """A registry plus a list of affine matrix constraints and an optional objective."""

    def __init__(self, name: str, registry: VariableRegistry | None = None) -> None:
        """Create an empty problem."""
        self.name = name
        self.registry = registry or VariableRegistry()
        self.constraints: list[AffineConstraint] = []
        self.objective: NDArray[np.float64] | None = None
        self.metadata: dict[str, Any] = {}
        self._frozen = False

    def add(
        self,
        name: str,
        expr: AffineExpr,
        sense: Sense,
        provenance: str,
    ) -> AffineConstraint:
        """Append a constraint; the expression must be square and symmetric."""
        if self._frozen:
            msg = f"problem {self.name!r} is frozen"
            raise RegistryFrozenError(msg)
        if expr.shape[0] != expr.shape[1]:
            msg = f"constraint {name!r} is not square: {expr.shape}"
            raise mk.DimensionMismatchError(msg, name)
        if not expr.is_symmetric(tol=1e-12):
            msg = f"constraint {name!r} is not symmetric"
            raise mk.DimensionMismatchError(msg, name)
        constraint = AffineConstraint(name, sense, expr.sym(), provenance)
        self.constraints.append(constraint)
        return constraint

    def minimize(self, expr: AffineExpr) -> None:
        """Set a linear objective from a 1×1 expression (its constant is dropped)."""
        if expr.shape != (1, 1):
            msg = "objective must be a scalar expression"
            raise mk.DimensionMismatchError(msg, "objective")
        c = np.zeros(self.registry.size)
        c[expr.indices] = expr.coefs[:, 0, 0]
        self.objective = c

    def freeze(self) -> "LmiProblem":
        """Freeze the registry and the constraint list; pad the objective.

        Every PSD-flagged variable gets its own ``> 0`` constraint here.
        """
        if self._frozen:
            return self
        for var in self.registry:
            if var.sign is Sign.PSD:
                self.add(f"{var.name}>0", self.registry.expr(var.name), Sense.POS, "positivity")
        self.registry.freeze()
        self._frozen = True
        for c in self.constraints:
            if c.expr.indices.size and int(c.expr.indices.max()) >= self.registry.size:
                msg = f"constraint {c.name!r} references an unknown variable index"
                raise mk.DimensionMismatchError(msg, c.name)
        if self.objective is not None and self.objective.size < self.registry.size:
            self.objective = np.pad(self.objective, (0, self.registry.size - self.objective.size))
        return self

    @property
    def frozen(self) -> bool:
        """Whether the problem is read-only."""
        return self._frozen

    def by_provenance(self) -> Counter[str]:
        """Number of constraints per provenance tag."""
        return Counter(c.provenance for c in self.constraints)

    def objective_value(self, x: ArrayLike) -> float:
        """``cᵀx`` (0 when there is no objective)."""
        if self.objective is None:
            return 0.0
        return float(self.objective @ np.asarray(x, dtype=np.float64)[: self.objective.size])

    def dump(self) -> str:
        """Text listing for cross-implementation diffing.

        One header line per constraint (name, sense, dimension, provenance)
        followed by ``F0`` and every coefficient as ``index row col value``
        triplets over the upper triangle.
        """
        lines = [f"problem {self.name} n_dec={self.registry.size}"]
        lines.extend(
            f"var {v.name} {v.shape.value} {v.rows}x{v.cols} offset={v.offset} sign={v.sign.value}"
            for v in self.registry
        )
        if self.objective is not None:
            lines.extend(
                f"objective {k} {self.objective[k]:.17g}" for k in np.nonzero(self.objective)[0]
            )
        for c in self.constraints:
            lines.append(f"constraint {c.name} {c.sense.value} dim={c.dim} provenance={c.provenance}")
            rr, cc = np.triu_indices(c.dim)
            lines.extend(
                f"  F0 {r} {col} {c.F0[r, col]:.17g}"
                for r, col in zip(rr, cc, strict=True)
                if c.F0[r, col] != 0.0
            )
            for k, fk in sorted(c.coefficients().items()):
                lines.extend(
                    f"  F{k} {r} {col} {fk[r, col]:.17g}"
                    for r, col in zip(rr, cc, strict=True)
                    if fk[r, col] != 0.0
                )
        return "\n".join(lines) + "\n"
