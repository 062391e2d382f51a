"""Fuzzy singular plant, delay, fault and uncertainty models."""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from src.core import matrixkit as mk
from src.core.matrixkit import Matrix


class InvalidModelError(ValueError):
    """A model object violates one of its structural invariants."""

    def __init__(self, message: str, field_path: str = "") -> None:
        """Record the offending field path."""
        super().__init__(message)
        self.field_path = field_path


def _check_shape(m: Matrix, shape: tuple[int, int], path: str) -> None:
    if m.shape != shape:
        msg = f"{path} has shape {m.shape}, expected {shape}"
        raise InvalidModelError(msg, path)


@dataclass(frozen=True, eq=False)
class FuzzyRule:
    """Local linear model of one IF-THEN rule."""

    A: Matrix
    A_d: Matrix
    B: Matrix
    C: Matrix
    E_out: Matrix
    E_dout: Matrix

    @classmethod
    def from_arrays(
        cls,
        A: ArrayLike,
        A_d: ArrayLike,
        B: ArrayLike,
        C: ArrayLike,
        E_out: ArrayLike,
        E_dout: ArrayLike | None = None,
    ) -> "FuzzyRule":
        """Build a rule, turning 1-D rows into matrices."""
        a = mk.as_matrix(A, "A")
        c = np.atleast_2d(np.asarray(C, dtype=np.float64))
        e_out = np.atleast_2d(np.asarray(E_out, dtype=np.float64))
        e_dout = (
            np.zeros_like(e_out)
            if E_dout is None
            else np.atleast_2d(np.asarray(E_dout, dtype=np.float64))
        )
        return cls(
            A=a,
            A_d=mk.as_matrix(A_d, "A_d"),
            B=mk.as_matrix(B, "B"),
            C=mk.as_matrix(c, "C"),
            E_out=mk.as_matrix(e_out, "E_out"),
            E_dout=mk.as_matrix(e_dout, "E_dout"),
        )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n, q, s, m): states, disturbances, measurements, outputs."""
        return self.A.shape[0], self.B.shape[1], self.C.shape[0], self.E_out.shape[0]

    def validate(self, dims: tuple[int, int, int, int], path: str) -> None:
        """Check every matrix against the plant dimensions."""
        n, q, s, m = dims
        _check_shape(self.A, (n, n), f"{path}.A")
        _check_shape(self.A_d, (n, n), f"{path}.A_d")
        _check_shape(self.B, (n, q), f"{path}.B")
        _check_shape(self.C, (s, n), f"{path}.C")
        _check_shape(self.E_out, (m, n), f"{path}.E_out")
        _check_shape(self.E_dout, (m, n), f"{path}.E_dout")


@dataclass(frozen=True, eq=False)
class UncertaintyStructure:
    """Linear-fractional parameter uncertainty.

    ``N[0..3]`` perturb A, A_d, E_out and E_dout; ``N[4..7]`` perturb the
    filter's A_f, A_tau_f, E_f and E_tau_f. State channels use ``M`` and
    output channels use ``M_out``.
    """

    M: Matrix
    N: tuple[Matrix, ...]
    L: Matrix
    M_out: Matrix
    enabled: bool = True

    @classmethod
    def disabled(cls, n: int, m: int, width: int = 1) -> "UncertaintyStructure":
        """Zero structure with the uncertainty switched off."""
        return cls(
            M=np.zeros((n, width)),
            N=tuple(np.zeros((width, n)) for _ in range(8)),
            L=np.zeros((width, width)),
            M_out=np.zeros((m, width)),
            enabled=False,
        )

    @property
    def width(self) -> int:
        """Size of the square uncertainty block."""
        return self.M.shape[1]

    def validate(self, n: int, m: int) -> None:
        """Check dimensions and the well-posedness condition I - L Lᵀ > 0."""
        w = self.width
        _check_shape(self.M, (n, w), "uncertainty.M")
        _check_shape(self.M_out, (m, w), "uncertainty.M_out")
        _check_shape(self.L, (w, w), "uncertainty.L")
        if len(self.N) != 8:
            msg = f"uncertainty needs N1..N8, got {len(self.N)}"
            raise InvalidModelError(msg, "uncertainty.N")
        for k, nk in enumerate(self.N, start=1):
            _check_shape(nk, (w, n), f"uncertainty.N{k}")
        if self.enabled and not mk.is_positive_definite(np.eye(w) - self.L @ self.L.T):
            msg = "I - L Lᵀ must be positive definite"
            raise InvalidModelError(msg, "uncertainty.L")

    def effective(self) -> "UncertaintyStructure":
        """The structure itself when enabled, an all-zero one otherwise."""
        if self.enabled:
            return self
        return UncertaintyStructure(
            M=np.zeros_like(self.M),
            N=tuple(np.zeros_like(nk) for nk in self.N),
            L=np.zeros_like(self.L),
            M_out=np.zeros_like(self.M_out),
            enabled=False,
        )


ActivationFn = Callable[[NDArray[np.float64]], NDArray[np.float64]]


@dataclass(frozen=True, eq=False)
class MembershipModel:
    """Rule activations as a function of the premise (state) vector."""

    rule_count: int
    evaluator: ActivationFn
    rho: tuple[float, ...]
    kind: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the derivative bounds."""
        if self.rule_count < 1:
            msg = "membership needs at least one rule"
            raise InvalidModelError(msg, "membership")
        if len(self.rho) != self.rule_count:
            msg = f"rho has {len(self.rho)} entries for {self.rule_count} rules"
            raise InvalidModelError(msg, "membership.rho")
        if any(r < 0 for r in self.rho):
            msg = "membership derivative bounds rho must be nonnegative"
            raise InvalidModelError(msg, "membership.rho")

    def activations(self, premise: ArrayLike) -> NDArray[np.float64]:
        """Raw activations α_i."""
        return np.asarray(self.evaluator(np.asarray(premise, dtype=np.float64)))

    @classmethod
    def sector_square(
        cls,
        index: int = 0,
        bound: float = 3.0,
        rho: Sequence[float] = (100.0, 100.0),
    ) -> "MembershipModel":
        """Two rules from the sector split of -x_k² over |x_k| ≤ bound.

        λ1 = x_k² / bound², λ2 = 1 - λ1, clamped outside the sector.
        """
        bound_sq = bound * bound

        def evaluate(x: NDArray[np.float64]) -> NDArray[np.float64]:
            lam = min(float(x[index]) ** 2 / bound_sq, 1.0)
            return np.array([lam, 1.0 - lam])

        return cls(
            rule_count=2,
            evaluator=evaluate,
            rho=tuple(float(r) for r in rho),
            kind="sector-x1-squared",
            params={"index": index, "bound": bound},
        )

    @classmethod
    def table(
        cls,
        points: Sequence[float],
        activations: Sequence[Sequence[float]],
        rho: Sequence[float],
        index: int = 0,
    ) -> "MembershipModel":
        """Piecewise-linear activations tabulated over one premise variable.

        ``activations[k]`` lists the α values of every rule at ``points[k]``;
        outside the table the end values are held.
        """
        xs = np.asarray(points, dtype=np.float64)
        table = np.asarray(activations, dtype=np.float64)
        if xs.ndim != 1 or table.shape[0] != xs.size or np.any(np.diff(xs) <= 0):
            msg = "table points must be increasing and match the activation rows"
            raise InvalidModelError(msg, "membership.params")
        if np.any(table < 0):
            msg = "tabulated activations must be nonnegative"
            raise InvalidModelError(msg, "membership.params")

        def evaluate(x: NDArray[np.float64]) -> NDArray[np.float64]:
            v = float(x[index])
            return np.array([np.interp(v, xs, table[:, i]) for i in range(table.shape[1])])

        return cls(
            rule_count=table.shape[1],
            evaluator=evaluate,
            rho=tuple(float(r) for r in rho),
            kind="table",
            params={"index": index, "points": xs.tolist(), "activations": table.tolist()},
        )


@dataclass(frozen=True)
class DelayGenerator:
    """Sinusoidal delay trajectory ``offset + amplitude·sin(frequency·t + phase)``."""

    offset: float
    amplitude: float = 0.0
    frequency: float = 0.0
    phase: float = 0.0

    @classmethod
    def case_one_upper(cls, d_lo: float, d_hi: float, mu: float) -> "DelayGenerator":
        """``(d_hi + d_lo·sin(2·mu·t/d_hi)) / 2``."""
        return cls(offset=d_hi / 2.0, amplitude=d_lo / 2.0, frequency=2.0 * mu / d_hi)

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        """Evaluate the delay at time(s) ``t``."""
        tt = np.asarray(t, dtype=np.float64)
        return self.offset + self.amplitude * np.sin(self.frequency * tt + self.phase)

    @property
    def lower(self) -> float:
        """Smallest value taken."""
        return self.offset - abs(self.amplitude)

    @property
    def upper(self) -> float:
        """Largest value taken."""
        return self.offset + abs(self.amplitude)

    @property
    def rate_bound(self) -> float:
        """Bound on the time derivative."""
        return abs(self.amplitude * self.frequency)


@dataclass(frozen=True)
class DelaySpec:
    """Two-interval random delay with a Bernoulli switch, plus the filter delay."""

    d_m: float
    d_0: float
    d_M: float
    sigma: tuple[float, float, float]
    tau_bar: float
    delta0: float
    d1: DelayGenerator
    d2: DelayGenerator
    tau: DelayGenerator

    def __post_init__(self) -> None:
        """Check the interval ordering and every generator's range and rate."""
        if not (0.0 <= self.d_m <= self.d_0 < self.d_M):
            msg = f"need 0 <= d_m <= d_0 < d_M, got ({self.d_m}, {self.d_0}, {self.d_M})"
            raise InvalidModelError(msg, "delays")
        if not (0.0 <= self.delta0 <= 1.0):
            msg = f"delta0 must lie in [0, 1], got {self.delta0}"
            raise InvalidModelError(msg, "delays.delta0")
        if self.tau_bar <= 0:
            msg = "tau_bar must be positive"
            raise InvalidModelError(msg, "delays.tau_bar")
        if any(s < 0 for s in self.sigma):
            msg = "sigma bounds must be nonnegative"
            raise InvalidModelError(msg, "delays.sigma")
        tol = 1e-12
        if self.d1.lower < self.d_m - tol or self.d1.upper > self.d_0 + tol:
            msg = f"d1 generator range [{self.d1.lower}, {self.d1.upper}] leaves [d_m, d_0]"
            raise InvalidModelError(msg, "delays.generators.d1")
        if self.d2.lower <= self.d_0 or self.d2.upper > self.d_M + tol:
            msg = f"d2 generator range [{self.d2.lower}, {self.d2.upper}] leaves (d_0, d_M]"
            raise InvalidModelError(msg, "delays.generators.d2")
        if self.tau.lower < -tol or self.tau.upper > self.tau_bar + tol:
            msg = f"tau generator range [{self.tau.lower}, {self.tau.upper}] leaves [0, tau_bar]"
            raise InvalidModelError(msg, "delays.generators.tau")
        for name, gen, bound in (
            ("d1", self.d1, self.sigma[0]),
            ("d2", self.d2, self.sigma[1]),
            ("tau", self.tau, self.sigma[2]),
        ):
            if gen.rate_bound > bound + 1e-6:
                msg = f"{name} generator rate {gen.rate_bound:.4g} exceeds sigma {bound}"
                raise InvalidModelError(msg, f"delays.generators.{name}")

    @property
    def abar(self) -> tuple[float, float, float]:
        """Upper ranges of the three delay channels (d_0, d_M, tau_bar)."""
        return self.d_0, self.d_M, self.tau_bar

    @property
    def max_delay(self) -> float:
        """Longest delay any channel can take."""
        return max(self.d_M, self.tau_bar)

    @classmethod
    def constant(
        cls,
        d_m: float,
        d_0: float,
        d_M: float,
        tau_bar: float,
        delta0: float,
        sigma: tuple[float, float, float] = (0.0, 0.0, 0.0),
    ) -> "DelaySpec":
        """Spec whose generators sit at interval midpoints."""
        return cls(
            d_m=d_m,
            d_0=d_0,
            d_M=d_M,
            sigma=sigma,
            tau_bar=tau_bar,
            delta0=delta0,
            d1=DelayGenerator((d_m + d_0) / 2.0),
            d2=DelayGenerator((d_0 + d_M) / 2.0),
            tau=DelayGenerator(tau_bar / 2.0),
        )


@dataclass(frozen=True)
class SensorFaultModel:
    """Per-channel sensor gain bounds β̲_g ≤ β_g ≤ β̄_g within [0, 1]."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        """Check the bounds."""
        if len(self.lower) != len(self.upper) or not self.lower:
            msg = "fault bounds need one (lower, upper) pair per channel"
            raise InvalidModelError(msg, "fault")
        for g, (lo, hi) in enumerate(zip(self.lower, self.upper, strict=True)):
            if not (0.0 <= lo <= hi <= 1.0):
                msg = f"channel {g}: need 0 <= lower <= upper <= 1, got ({lo}, {hi})"
                raise InvalidModelError(msg, f"fault.beta_lower[{g}]")

    @classmethod
    def fault_free(cls, channels: int) -> "SensorFaultModel":
        """All sensors healthy (β = I)."""
        return cls((1.0,) * channels, (1.0,) * channels)

    @classmethod
    def fixed(cls, beta: float, channels: int) -> "SensorFaultModel":
        """Degenerate band at a single gain."""
        return cls((beta,) * channels, (beta,) * channels)

    @property
    def channels(self) -> int:
        """Number of measured outputs."""
        return len(self.lower)

    @property
    def midpoint(self) -> Matrix:
        """Ĝ: diagonal of band midpoints."""
        return np.diag((np.array(self.lower) + np.array(self.upper)) / 2.0)

    @property
    def half_range(self) -> Matrix:
        """Ǧ: diagonal of nonnegative band half-widths."""
        return np.diag((np.array(self.upper) - np.array(self.lower)) / 2.0)

    def vertices(self) -> list[Matrix]:
        """All 2^s extreme gain matrices, duplicates removed."""
        seen: dict[tuple[float, ...], Matrix] = {}
        for mask in range(2**self.channels):
            diag = tuple(
                self.upper[g] if mask >> g & 1 else self.lower[g] for g in range(self.channels)
            )
            seen.setdefault(diag, np.diag(diag))
        return list(seen.values())


InitialFunction = Callable[[float], NDArray[np.float64]]


@dataclass(frozen=True, eq=False)
class FuzzyPlant:
    """Delayed singular T-S fuzzy plant with faults and uncertainty."""

    E: Matrix
    rules: tuple[FuzzyRule, ...]
    membership: MembershipModel
    delays: DelaySpec
    uncertainty: UncertaintyStructure
    fault: SensorFaultModel
    initial: NDArray[np.float64] | InitialFunction | None = None
    name: str = "plant"
    e_rank: int = field(init=False)

    def __post_init__(self) -> None:
        """Validate dimensions and record rank(E)."""
        if not self.rules:
            msg = "plant needs at least one rule"
            raise InvalidModelError(msg, "plant.rules")
        dims = self.rules[0].dims
        n, _, s, m = dims
        _check_shape(self.E, (n, n), "plant.E")
        for i, rule in enumerate(self.rules):
            rule.validate(dims, f"plant.rules[{i}]")
        if self.membership.rule_count != len(self.rules):
            msg = (
                f"membership has {self.membership.rule_count} rules, "
                f"plant has {len(self.rules)}"
            )
            raise InvalidModelError(msg, "plant.membership")
        if self.fault.channels != s:
            msg = f"fault model has {self.fault.channels} channels, plant measures {s}"
            raise InvalidModelError(msg, "fault")
        self.uncertainty.validate(n, m)
        if self.initial is not None and not callable(self.initial):
            _check_shape(np.asarray(self.initial, dtype=np.float64).reshape(-1, 1), (n, 1), "initial")
        object.__setattr__(self, "e_rank", mk.numerical_rank(self.E))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(n, q, s, m)."""
        return self.rules[0].dims

    @property
    def n(self) -> int:
        """State dimension."""
        return self.dims[0]

    @property
    def rule_count(self) -> int:
        """Number of fuzzy rules r."""
        return len(self.rules)

    @property
    def is_descriptor_singular(self) -> bool:
        """True when rank(E) < n."""
        return self.e_rank < self.n

    def history(self, t: float) -> NDArray[np.float64]:
        """Initial function ψ(t) on [-max delay, 0]; zero when unset."""
        if self.initial is None:
            return np.zeros(self.n)
        if callable(self.initial):
            return np.asarray(self.initial(t), dtype=np.float64).reshape(self.n)
        return np.asarray(self.initial, dtype=np.float64).reshape(self.n)

    def with_changes(self, **changes: Any) -> "FuzzyPlant":
        """Copy with some fields replaced."""
        fields = {
            "E": self.E,
            "rules": self.rules,
            "membership": self.membership,
            "delays": self.delays,
            "uncertainty": self.uncertainty,
            "fault": self.fault,
            "initial": self.initial,
            "name": self.name,
        }
        fields.update(changes)
        return FuzzyPlant(**fields)


@dataclass(frozen=True)
class DcMotorParameters:
    """Physical constants of the nonlinear DC motor."""

    J: float = 0.082
    B: float = 0.3
    L_mH: float = 1000.0
    K_a: float = 0.576
    K_b: float = 0.612
    b_scale: float = 0.06

    @property
    def L(self) -> float:
        """Armature inductance in henry."""
        return self.L_mH / 1000.0

    def as_table(self) -> dict[str, float]:
        """Values keyed by their printed symbols."""
        return {"J": self.J, "B": self.B, "L": self.L_mH, "K_a": self.K_a, "K_b": self.K_b}
