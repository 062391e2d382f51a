"""Plant service: memberships, admissibility, random draws and bundled plants."""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from src.core import matrixkit as mk
from src.core.config import settings
from src.core.matrixkit import Matrix
from src.models.plant import (
    DcMotorParameters,
    DelayGenerator,
    DelaySpec,
    FuzzyPlant,
    FuzzyRule,
    InvalidModelError,
    MembershipModel,
    SensorFaultModel,
    UncertaintyStructure,
)


Seed = int | np.random.SeedSequence | np.random.Generator | None


class PlantModelError(Exception):
    """Plant service error."""


class DegenerateMembershipError(PlantModelError):
    """All rule activations vanished."""


class DegenerateUncertaintyError(PlantModelError):
    """I - G L stayed singular for every uncertainty draw."""


__all__ = [
    "AdmissibilityReport",
    "BernoulliSchedule",
    "DcMotorModels",
    "DegenerateMembershipError",
    "DegenerateUncertaintyError",
    "DelayPath",
    "InvalidModelError",
    "PlantModelError",
    "blend",
    "build_dc_motor",
    "build_example1",
    "check_admissible",
    "dc_motor_vector_field",
    "fault_decompose",
    "memberships_at",
    "normalize_memberships",
    "sample_delay_path",
    "sample_fault",
    "sample_uncertainty",
]


def normalize_memberships(activations: ArrayLike) -> NDArray[np.float64]:
    """Normalize raw activations α_i into memberships λ_i = α_i / Σα_j."""
    alpha = np.asarray(activations, dtype=np.float64).reshape(-1)
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        msg = f"activations must be finite and nonnegative, got {alpha.tolist()}"
        raise DegenerateMembershipError(msg)
    total = float(alpha.sum())
    if total <= 0.0:
        msg = "all rule activations are zero"
        raise DegenerateMembershipError(msg)
    return alpha / total


def memberships_at(plant: FuzzyPlant, x: ArrayLike) -> NDArray[np.float64]:
    """Normalized memberships of ``plant`` at state ``x``."""
    return normalize_memberships(plant.membership.activations(x))


def blend(lam: ArrayLike, per_rule: Sequence[ArrayLike]) -> Matrix:
    """Membership-weighted sum Σ λ_i M_i."""
    weights = np.asarray(lam, dtype=np.float64).reshape(-1)
    if weights.size != len(per_rule):
        msg = f"{weights.size} memberships for {len(per_rule)} rule matrices"
        raise mk.DimensionMismatchError(msg, "blend")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in per_rule])
    return np.tensordot(weights, stack, axes=1)


@dataclass(frozen=True)
class AdmissibilityReport:
    """Regularity and impulse-freeness of a pair (E, A)."""

    regular: bool
    impulse_free: bool
    degree: int
    rank_e: int

    @property
    def admissible(self) -> bool:
        """Both conditions hold."""
        return self.regular and self.impulse_free


def _det_pencil_coefficients(
    E: Matrix,
    A: Matrix,
) -> tuple[NDArray[np.float64], NDArray[np.float64], float]:
    n = E.shape[0]
    radius = 1.0 + float(np.linalg.norm(A, 2)) / max(float(np.linalg.norm(E, 2)), 1.0)
    k = np.arange(n + 1)
    nodes = np.cos((2 * k + 1) * math.pi / (2 * (n + 1)))
    samples = np.array([np.linalg.det(radius * t * E - A) for t in nodes])
    cheb = np.polynomial.chebyshev.chebfit(nodes, samples, n)
    power = np.polynomial.chebyshev.cheb2poly(cheb)
    scale = max(1.0, (float(np.linalg.norm(E, 2)) * radius + float(np.linalg.norm(A, 2))) ** n)
    return samples, power, scale


def check_admissible(E: ArrayLike, A: ArrayLike) -> AdmissibilityReport:
    """Regularity and impulse-freeness from det(sE - A).

    The determinant is sampled at n+1 Chebyshev nodes and interpolated, which
    is exact for a polynomial of degree n.
    """
    e = mk.as_matrix(E, "E")
    a = mk.as_matrix(A, "A")
    if e.shape != a.shape or e.shape[0] != e.shape[1]:
        msg = f"E {e.shape} and A {a.shape} must be square and equal"
        raise mk.DimensionMismatchError(msg, "check_admissible")
    rank_e = mk.numerical_rank(e)
    samples, coeffs, scale = _det_pencil_coefficients(e, a)
    if np.all(np.abs(samples) < 1e-10 * scale):
        return AdmissibilityReport(regular=False, impulse_free=False, degree=-1, rank_e=rank_e)
    cutoff = 1e-9 * float(np.max(np.abs(coeffs)))
    nonzero = np.nonzero(np.abs(coeffs) > cutoff)[0]
    degree = int(nonzero[-1]) if nonzero.size else 0
    return AdmissibilityReport(
        regular=True,
        impulse_free=degree == rank_e,
        degree=degree,
        rank_e=rank_e,
    )


def fault_decompose(model: SensorFaultModel) -> tuple[Matrix, Matrix]:
    """Midpoint Ĝ and half-range Ǧ of the sensor gain band."""
    return model.midpoint, model.half_range


def sample_fault(model: SensorFaultModel, seed: Seed = None) -> Matrix:
    """Draw each β_gg uniformly from its band."""
    rng = np.random.default_rng(seed)
    lower = np.asarray(model.lower)
    upper = np.asarray(model.upper)
    draws = np.where(upper > lower, rng.uniform(lower, upper), lower)
    return np.diag(draws)


@dataclass(frozen=True)
class BernoulliSchedule:
    """Piecewise-constant 0/1 indicator, one value per resampling interval."""

    values: NDArray[np.int8]
    interval: float

    @classmethod
    def draw(
        cls,
        delta0: float,
        horizon: float,
        interval: float,
        rng: np.random.Generator,
    ) -> "BernoulliSchedule":
        """Draw P(δ=1) = delta0 independently per interval."""
        count = max(1, math.ceil(horizon / interval) + 1)
        values = (rng.random(count) < delta0).astype(np.int8)
        return cls(values=values, interval=interval)

    def __call__(self, t: float) -> int:
        """Indicator value at time ``t``."""
        k = min(max(int(t // self.interval), 0), self.values.size - 1)
        return int(self.values[k])


@dataclass(frozen=True, eq=False)
class DelayPath:
    """Delays and switching indicator sampled on a uniform grid."""

    t: NDArray[np.float64]
    delta: NDArray[np.int8]
    d1: NDArray[np.float64]
    d2: NDArray[np.float64]
    tau: NDArray[np.float64]
    schedule: BernoulliSchedule

    @property
    def d_eff(self) -> NDArray[np.float64]:
        """δ·d1 + (1 - δ)·d2."""
        return self.delta * self.d1 + (1 - self.delta) * self.d2


def sample_delay_path(
    spec: DelaySpec,
    horizon: float,
    step: float,
    seed: Seed = None,
    resample_interval: float | None = None,
) -> DelayPath:
    """Sample the Bernoulli indicator and delay trajectories on a grid."""
    if step <= 0 or horizon < step:
        msg = f"need step > 0 and horizon >= step, got step={step}, horizon={horizon}"
        raise ValueError(msg)
    interval = resample_interval or settings.delta_resample_interval
    rng = np.random.default_rng(seed)
    schedule = BernoulliSchedule.draw(spec.delta0, horizon, interval, rng)
    t = np.linspace(0.0, horizon, round(horizon / step) + 1)
    delta = np.array([schedule(tk) for tk in t], dtype=np.int8)
    return DelayPath(
        t=t,
        delta=delta,
        d1=spec.d1(t),
        d2=spec.d2(t),
        tau=spec.tau(t),
        schedule=schedule,
    )


def _random_contraction(width: int, rng: np.random.Generator) -> Matrix:
    q, r = np.linalg.qr(rng.standard_normal((width, width)))
    q *= np.sign(np.diag(r))
    return q @ np.diag(rng.uniform(0.0, 1.0, width))


def sample_uncertainty(
    u: UncertaintyStructure,
    seed: Seed = None,
    max_retries: int = 10,
) -> Matrix:
    """Draw ∇ = (I - G L)⁻¹ G with ‖G‖ ≤ 1."""
    if not u.enabled:
        return np.zeros((u.width, u.width))
    rng = np.random.default_rng(seed)
    eye = np.eye(u.width)
    for attempt in range(max_retries):
        g = _random_contraction(u.width, rng)
        try:
            return mk.solve_linear(eye - g @ u.L, g, rcond_floor=1e-10)
        except mk.SingularMatrixError:
            logger.debug(f"I - G L singular on draw {attempt}, resampling")
    msg = f"I - G L singular after {max_retries} draws"
    raise DegenerateUncertaintyError(msg)


def dc_motor_vector_field(
    x: ArrayLike,
    w: float = 0.0,
    b: float = 0.0,
    params: DcMotorParameters | None = None,
) -> NDArray[np.float64]:
    """Right-hand side of the nonlinear DC motor with cubic armature resistance."""
    p = params or DcMotorParameters()
    x1, x2 = np.asarray(x, dtype=np.float64).reshape(2)
    return np.array(
        [
            -4.0 * x1 - x1**3 - (p.K_b + p.b_scale * b) * x2,
            p.K_a / p.J * x1 - p.B / p.J * x2 + w / p.J,
        ],
    )


@dataclass(frozen=True, eq=False)
class DcMotorModels:
    """The sector model, the printed filtering plant and the design plant."""

    sector: FuzzyPlant
    companion: FuzzyPlant
    design: FuzzyPlant
    parameters: DcMotorParameters


def _dc_motor_delays() -> DelaySpec:
    mu1, mu2 = 0.2, 0.4
    d_m, d_0, d_M = 0.008, 0.012, 0.1
    half_pi = math.pi / 2.0
    return DelaySpec(
        d_m=d_m,
        d_0=d_0,
        d_M=d_M,
        sigma=(mu1, mu2, 0.08 * half_pi),
        tau_bar=0.23,
        delta0=0.15,
        d1=DelayGenerator(0.01, 0.002, half_pi),
        d2=DelayGenerator.case_one_upper(d_0, d_M, mu2),
        tau=DelayGenerator(0.15, 0.08, half_pi),
    )


def _dc_motor_uncertainty(n: int, m: int, *, enabled: bool) -> UncertaintyStructure:
    if not enabled:
        return UncertaintyStructure.disabled(n, m)
    rows = [
        [0.0, 0.6],
        [0.3, 0.4],
        [0.4, 0.5],
        [0.5, 0.6],
        [0.15, 0.25],
        [0.25, 0.35],
        [0.35, 0.45],
        [0.45, 0.55],
    ]
    return UncertaintyStructure(
        M=np.array([[-0.6], [0.5]]),
        N=tuple(np.array([row]) for row in rows),
        L=np.zeros((1, 1)),
        M_out=np.zeros((m, 1)),
    )


def build_dc_motor(
    b_amplitude: float = 0.0,
    *,
    uncertain: bool = False,
    beta: float = 0.5,
    rho: float | None = None,
) -> DcMotorModels:
    """DC motor plants from the sector-nonlinearity fuzzy model.

    Where each matrix comes from:

    - ``sector``: A is the motor state equation with the resistor law
      replaced by its sector slopes -4 and -13; B = (0, -1/J) is the load
      torque input of that same state equation. Rules are ordered by the
      membership corner, so the -13 model is rule 1.
    - ``companion``: A, A_d, B = (0, -0.05/J), C, E_out and E_d are the
      printed numeric local models of the delayed fuzzy plant, in printed
      rule order.
    - ``design``: the sector A matrices in printed rule order (-4 first)
      with A_d, B, C, E_out and E_d of the printed local models. This is the
      plant the bundled model files carry, so B is (0, -0.05/J) and not the
      state-equation input.
    """
    if abs(b_amplitude) > 1.0:
        msg = f"|b| must not exceed 1, got {b_amplitude}"
        raise InvalidModelError(msg, "b_amplitude")
    p = DcMotorParameters()
    k_b = p.K_b + p.b_scale * b_amplitude
    row2 = [p.K_a / p.J, -p.B / p.J]
    a_sector = (
        np.array([[-4.0, -k_b], row2]),
        np.array([[-13.0, -k_b], row2]),
    )
    b_sector = np.array([[0.0], [-1.0 / p.J]])

    a_companion = (
        np.array([[0.8, -0.0306], [0.3512, 0.8171]]),
        np.array([[0.35, -0.0306], [0.3512, 0.8171]]),
    )
    b_companion = np.array([[0.0], [-0.05 / p.J]])
    c = (np.array([[-3.0, 0.5]]), np.array([[1.5, 2.0]]))
    e_out = (np.array([[0.2, 1.0]]), np.array([[0.3, 1.0]]))
    a_d = (
        np.array([[-0.1, 0.05], [-0.5, -0.75]]),
        np.array([[-0.9, 0.0], [-1.15, -1.25]]),
    )
    e_d = (np.array([[-0.1, 0.0]]), np.array([[0.0, 0.2]]))

    weight = settings.default_rho if rho is None else rho
    membership = MembershipModel.sector_square(index=0, bound=3.0, rho=(weight, weight))
    delays = _dc_motor_delays()
    fault = SensorFaultModel.fixed(beta, 1)
    uncertainty = _dc_motor_uncertainty(2, 1, enabled=uncertain)
    x0 = np.array([0.5, -0.3])

    def plant(name: str, rules: tuple[FuzzyRule, ...]) -> FuzzyPlant:
        return FuzzyPlant(
            E=np.eye(2),
            rules=rules,
            membership=membership,
            delays=delays,
            uncertainty=uncertainty,
            fault=fault,
            initial=x0,
            name=name,
        )

    # λ1 = x1²/9 weighs the x1² = 9 corner, so the -13 model goes first here
    sector = plant(
        "dc-motor-sector",
        tuple(
            FuzzyRule.from_arrays(a_sector[1 - i], np.zeros((2, 2)), b_sector, c[i], e_out[i])
            for i in range(2)
        ),
    )
    companion = plant(
        "dc-motor-companion",
        tuple(
            FuzzyRule.from_arrays(a_companion[i], a_d[i], b_companion, c[i], e_out[i], e_d[i])
            for i in range(2)
        ),
    )
    design = plant(
        "dc-motor-uncertain" if uncertain else "dc-motor",
        tuple(
            FuzzyRule.from_arrays(a_sector[i], a_d[i], b_companion, c[i], e_out[i], e_d[i])
            for i in range(2)
        ),
    )
    return DcMotorModels(sector=sector, companion=companion, design=design, parameters=p)


def _centered_generator(lo: float, hi: float, rate: float) -> DelayGenerator:
    amplitude = (hi - lo) / 4.0
    frequency = 0.0 if amplitude == 0.0 else rate / amplitude
    return DelayGenerator(offset=(lo + hi) / 2.0, amplitude=amplitude, frequency=frequency)


def build_example1(
    d_M: float = 1.0,
    mu: tuple[float, float] = (0.2, 0.2),
    rho: float | None = None,
    delta0: float = 0.5,
) -> FuzzyPlant:
    """Two-rule benchmark plant with identity descriptor.

    The lower delay interval is [0, d_M/2] and the filter delay shares the
    upper bound d_M.
    """
    rules = (
        FuzzyRule.from_arrays(
            [[-2.1, 0.1], [1.0, -2.0]],
            [[-1.1, 0.1], [-0.8, -0.9]],
            [[1.0], [-0.2]],
            [[1.0, 0.0]],
            [[1.0, -0.5]],
        ),
        FuzzyRule.from_arrays(
            [[-1.9, 0.0], [-0.2, -1.1]],
            [[-0.9, 0.0], [-1.1, -1.2]],
            [[0.3], [0.1]],
            [[0.5, -0.6]],
            [[-0.2, 0.3]],
        ),
    )
    d_0 = d_M / 2.0
    sigma = (mu[0], mu[1], mu[0])
    delays = DelaySpec(
        d_m=0.0,
        d_0=d_0,
        d_M=d_M,
        sigma=sigma,
        tau_bar=d_M,
        delta0=delta0,
        d1=_centered_generator(0.0, d_0, sigma[0] / 2.0),
        d2=_centered_generator(d_0, d_M, sigma[1] / 2.0),
        tau=_centered_generator(0.0, d_M, sigma[2] / 2.0),
    )
    weight = settings.default_rho if rho is None else rho
    membership = MembershipModel.table(
        points=[-2.0, 2.0],
        activations=[[1.0, 0.0], [0.0, 1.0]],
        rho=(weight, weight),
    )
    return FuzzyPlant(
        E=np.eye(2),
        rules=rules,
        membership=membership,
        delays=delays,
        uncertainty=UncertaintyStructure.disabled(2, 1),
        fault=SensorFaultModel.fault_free(1),
        initial=None,
        name=f"example1-dM{d_M:g}",
    )
