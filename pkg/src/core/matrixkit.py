"""Dense real matrix helpers shared by every other module.

Thin, validated wrappers over numpy / scipy.linalg. All functions are pure
and safe to call from several threads.
"""

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from numpy.typing import ArrayLike, NDArray


Matrix = NDArray[np.float64]

SINGULAR_RCOND = 1e-12


class MatrixKitError(Exception):
    """Base error for matrix operations."""


class NumericalFailureError(MatrixKitError):
    """A decomposition failed to converge."""

    def __init__(self, message: str, dim: int) -> None:
        """Record the dimension of the offending matrix."""
        super().__init__(message)
        self.dim = dim


class SingularMatrixError(MatrixKitError):
    """A linear system is singular to working tolerance."""

    def __init__(self, message: str, rcond: float) -> None:
        """Record the reciprocal condition estimate."""
        super().__init__(message)
        self.rcond = rcond


class DimensionMismatchError(MatrixKitError):
    """A block or operand has the wrong shape."""

    def __init__(self, message: str, where: str) -> None:
        """Record where the mismatch was found."""
        super().__init__(message)
        self.where = where


def as_matrix(data: ArrayLike, name: str = "matrix") -> Matrix:
    """Return ``data`` as a finite 2-D float array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or 0 in arr.shape:
        msg = f"{name} must be a non-empty 2-D array, got shape {arr.shape}"
        raise DimensionMismatchError(msg, name)
    if not np.all(np.isfinite(arr)):
        msg = f"{name} contains NaN or Inf entries"
        raise MatrixKitError(msg)
    return arr


def as_symmetric(data: ArrayLike, name: str = "matrix") -> Matrix:
    """Return ``data`` as a symmetric array, mirroring the lower triangle.

    The result equals its transpose exactly.
    """
    arr = as_matrix(data, name)
    if arr.shape[0] != arr.shape[1]:
        msg = f"{name} must be square, got shape {arr.shape}"
        raise DimensionMismatchError(msg, name)
    lower = np.tril(arr)
    return lower + np.tril(arr, -1).T


def pack_lower(m: Matrix) -> NDArray[np.float64]:
    """Pack the lower triangle of a symmetric matrix row by row."""
    return m[np.tril_indices(m.shape[0])]


def unpack_lower(packed: ArrayLike, dim: int) -> Matrix:
    """Inverse of :func:`pack_lower`."""
    out = np.zeros((dim, dim))
    out[np.tril_indices(dim)] = np.asarray(packed, dtype=np.float64)
    return out + np.tril(out, -1).T


@dataclass(frozen=True)
class BlockLayout:
    """Row and column block sizes of a partitioned matrix."""

    row_sizes: tuple[int, ...]
    col_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        """Validate that all block sizes are positive."""
        if any(s <= 0 for s in (*self.row_sizes, *self.col_sizes)):
            msg = "block sizes must be positive"
            raise DimensionMismatchError(msg, "layout")

    @classmethod
    def square(cls, sizes: Sequence[int]) -> "BlockLayout":
        """Layout with identical row and column partitions."""
        return cls(tuple(sizes), tuple(sizes))

    @property
    def shape(self) -> tuple[int, int]:
        """Total shape of the assembled matrix."""
        return sum(self.row_sizes), sum(self.col_sizes)

    def row_offsets(self) -> list[int]:
        """Starting row of each row block."""
        return [0, *np.cumsum(self.row_sizes)[:-1].tolist()]

    def col_offsets(self) -> list[int]:
        """Starting column of each column block."""
        return [0, *np.cumsum(self.col_sizes)[:-1].tolist()]


def sym_eig(m: ArrayLike) -> tuple[NDArray[np.float64], Matrix]:
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Raises:
        NumericalFailureError: if LAPACK does not converge.

    """
    sym = as_symmetric(m)
    try:
        values, vectors = sla.eigh(sym)
    except (sla.LinAlgError, ValueError) as e:
        msg = f"symmetric eigensolver failed for a {sym.shape[0]}x{sym.shape[0]} matrix"
        raise NumericalFailureError(msg, sym.shape[0]) from e
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def max_eig(m: ArrayLike) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    return float(sym_eig(m)[0][0])


def min_eig(m: ArrayLike) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(sym_eig(m)[0][-1])


def is_negative_definite(m: ArrayLike, margin: float = 0.0) -> bool:
    """True iff the largest eigenvalue is below ``-margin``."""
    if margin < 0:
        msg = "margin must be nonnegative"
        raise ValueError(msg)
    return max_eig(m) < -margin


def is_positive_definite(m: ArrayLike, margin: float = 0.0) -> bool:
    """True iff the smallest eigenvalue is above ``margin``."""
    if margin < 0:
        msg = "margin must be nonnegative"
        raise ValueError(msg)
    return min_eig(m) > margin


def kron(a: ArrayLike, b: ArrayLike) -> Matrix:
    """Kronecker product ``a ⊗ b``."""
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def ones_column(n: int) -> Matrix:
    """The vector of ones ``1_n`` as an n×1 column."""
    return np.ones((n, 1))


def assemble_blocks(
    layout: BlockLayout,
    blocks: Mapping[tuple[int, int], ArrayLike],
    *,
    symmetric: bool,
) -> Matrix:
    """Place blocks into a zero matrix partitioned by ``layout``.

    In symmetric mode only upper blocks (row <= col) may be given; each is
    mirrored transposed into its lower slot and the diagonal blocks must be
    symmetric.

    Raises:
        DimensionMismatchError: naming the offending slot.

    """
    if symmetric and layout.row_sizes != layout.col_sizes:
        msg = "symmetric assembly needs identical row and column partitions"
        raise DimensionMismatchError(msg, "layout")
    out = np.zeros(layout.shape)
    rows, cols = layout.row_offsets(), layout.col_offsets()
    for (r, c), value in blocks.items():
        slot = f"({r},{c})"
        if not (0 <= r < len(layout.row_sizes) and 0 <= c < len(layout.col_sizes)):
            msg = f"block slot {slot} outside layout"
            raise DimensionMismatchError(msg, slot)
        block = as_matrix(value, f"block {slot}")
        expected = (layout.row_sizes[r], layout.col_sizes[c])
        if block.shape != expected:
            msg = f"block {slot} has shape {block.shape}, slot expects {expected}"
            raise DimensionMismatchError(msg, slot)
        if symmetric and r > c:
            msg = f"block {slot} is below the diagonal; give the upper block"
            raise DimensionMismatchError(msg, slot)
        if symmetric and r == c and not np.array_equal(block, block.T):
            msg = f"diagonal block {slot} is not symmetric"
            raise DimensionMismatchError(msg, slot)
        r0, c0 = rows[r], cols[c]
        out[r0 : r0 + expected[0], c0 : c0 + expected[1]] = block
        if symmetric and r != c:
            out[c0 : c0 + expected[1], r0 : r0 + expected[0]] = block.T
    return out


def reciprocal_condition(a: ArrayLike) -> float:
    """Ratio of smallest to largest singular value (0 for a zero matrix)."""
    s = sla.svdvals(as_matrix(a))
    if s[0] == 0.0:
        return 0.0
    return float(s[-1] / s[0])


def condition_number(a: ArrayLike) -> float:
    """2-norm condition number, ``inf`` when singular."""
    rcond = reciprocal_condition(a)
    return float("inf") if rcond == 0.0 else 1.0 / rcond


def solve_linear(a: ArrayLike, b: ArrayLike, rcond_floor: float = SINGULAR_RCOND) -> Matrix:
    """Solve ``a X = b`` by LU factorization.

    Raises:
        SingularMatrixError: when the reciprocal condition is below ``rcond_floor``.

    """
    am = as_matrix(a, "a")
    bm = as_matrix(b, "b")
    if am.shape[0] != am.shape[1]:
        msg = f"solve_linear needs a square matrix, got {am.shape}"
        raise DimensionMismatchError(msg, "a")
    if bm.shape[0] != am.shape[0]:
        msg = f"right-hand side has {bm.shape[0]} rows, expected {am.shape[0]}"
        raise DimensionMismatchError(msg, "b")
    rcond = reciprocal_condition(am)
    if rcond < rcond_floor:
        msg = f"matrix is singular to working precision (rcond={rcond:.3e})"
        raise SingularMatrixError(msg, rcond)
    lu, piv = sla.lu_factor(am)
    return sla.lu_solve((lu, piv), bm)


def inverse(a: ArrayLike, rcond_floor: float = SINGULAR_RCOND) -> Matrix:
    """Matrix inverse through :func:`solve_linear`."""
    am = as_matrix(a, "a")
    return solve_linear(am, np.eye(am.shape[0]), rcond_floor)


def numerical_rank(a: ArrayLike, tol: float | None = None) -> int:
    """Rank from singular values."""
    am = as_matrix(a)
    s = sla.svdvals(am)
    if tol is None:
        tol = max(am.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    return int(np.sum(s > tol))


def null_space(a: ArrayLike) -> Matrix:
    """Orthonormal basis of the right null space."""
    return sla.null_space(as_matrix(a))
