"""Simulation service: closed-loop integration, empirical gains and Monte Carlo batches."""

import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray

from src.core import matrixkit as mk
from src.core.config import settings
from src.models.filter import FilterRealization, FilterRule
from src.models.plant import FuzzyPlant
from src.models.trace import DisturbanceSignal, SimulationTrace
from src.services import plant_service


Vector = NDArray[np.float64]
SimSeed = int | np.random.SeedSequence | None
STABILITY_RATIO = 1e-3


class SimulationError(Exception):
    """Simulation service error."""


class DivergenceError(SimulationError):
    """The state norm crossed the blow-up cap."""

    def __init__(self, message: str, time: float) -> None:
        """Record the first offending time."""
        super().__init__(message)
        self.time = time


class UndefinedGainError(SimulationError):
    """The disturbance carried no energy."""


class SingularDescriptorError(SimulationError):
    """The augmented descriptor matrix is singular."""


class BetaMode(StrEnum):
    """When the sensor gain is redrawn."""

    PER_RUN = "per-run"
    PER_INTERVAL = "per-interval"


def _child(seed: np.random.SeedSequence, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed.entropy, spawn_key=(*seed.spawn_key, k)))


def _as_seed_sequence(seed: SimSeed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def run_seeds(base_seed: int | None, runs: int) -> list[np.random.SeedSequence]:
    """Independent per-run seeds derived from one base seed."""
    return np.random.SeedSequence(base_seed).spawn(runs)


class _History:
    """Augmented-state samples on the grid, linearly interpolated.

    Before t = 0 the plant's initial function is used; without one the
    state is held at its t = 0 value.
    """

    def __init__(self, steps: int, step: float, plant: FuzzyPlant, x0: Vector, xf0: Vector) -> None:
        self.step = step
        self.plant = plant
        self.x0 = x0
        self.xf0 = xf0
        self.values = np.zeros((steps + 1, plant.n + xf0.size))
        self.filled = 0

    def push(self, k: int, zeta: Vector) -> None:
        self.values[k] = zeta
        self.filled = k

    def __call__(self, s: float) -> Vector:
        if s <= 0.0:
            x = self.x0 if self.plant.initial is None else self.plant.history(s)
            return np.concatenate([x, self.xf0])
        pos = s / self.step
        k = int(pos)
        if k >= self.filled:
            return self.values[self.filled]
        frac = pos - k
        return (1.0 - frac) * self.values[k] + frac * self.values[k + 1]


@dataclass(frozen=True, eq=False)
class _Perturbation:
    """Additive uncertainty terms held over one resampling interval."""

    A: Vector
    A_d: Vector
    E_out: Vector
    E_dout: Vector
    A_f: Vector
    A_tau_f: Vector
    E_f: Vector
    E_tau_f: Vector


def _perturbations(plant: FuzzyPlant, count: int, rng: np.random.Generator) -> list[_Perturbation] | None:
    u = plant.uncertainty
    if not u.enabled:
        return None
    out = []
    for _ in range(count):
        g = plant_service.sample_uncertainty(u, rng)
        gf = plant_service.sample_uncertainty(u, rng)
        out.append(
            _Perturbation(
                A=u.M @ g @ u.N[0],
                A_d=u.M @ g @ u.N[1],
                E_out=u.M_out @ g @ u.N[2],
                E_dout=u.M_out @ g @ u.N[3],
                A_f=u.M @ gf @ u.N[4],
                A_tau_f=u.M @ gf @ u.N[5],
                E_f=u.M_out @ gf @ u.N[6],
                E_tau_f=u.M_out @ gf @ u.N[7],
            ),
        )
    return out


class _ClosedLoop:
    """Right-hand side and outputs of plant plus filter at one sample path."""

    def __init__(
        self,
        plant: FuzzyPlant,
        filt: FilterRealization,
        schedule: plant_service.BernoulliSchedule,
        betas: list[Vector],
        perturbations: list[_Perturbation] | None,
        omega: Callable[[float], Vector],
        history: _History,
    ) -> None:
        self.plant = plant
        self.filt = filt
        self.schedule = schedule
        self.betas = betas
        self.perturbations = perturbations
        self.omega = omega
        self.history = history
        self.n = plant.n
        self.e_inv = mk.inverse(plant.E)
        self.ef_inv = mk.inverse(filt.E_f)
        stack = [np.stack(m) for m in zip(*((r.A, r.A_d, r.B, r.C, r.E_out, r.E_dout) for r in plant.rules), strict=True)]
        self.A, self.A_d, self.B, self.C, self.E_out, self.E_dout = stack
        self.filter_follows_rules = filt.rule_count == plant.rule_count

    def _interval(self, t: float) -> int:
        return min(max(int(t // self.schedule.interval), 0), self.schedule.values.size - 1)

    def beta_at(self, t: float) -> Vector:
        return self.betas[0] if len(self.betas) == 1 else self.betas[self._interval(t)]

    def _filter_rule(self, lam: Vector) -> FilterRule:
        return self.filt.blend(lam) if self.filter_follows_rules else self.filt.rules[0]

    def delays(self, t: float) -> tuple[int, float, float, float]:
        spec = self.plant.delays
        return self.schedule(t), float(spec.d1(t)), float(spec.d2(t)), float(spec.tau(t))

    def evaluate(self, t: float, zeta: Vector) -> tuple[Vector, Vector, Vector, Vector]:
        """State derivative, ω, z and z_f at ``(t, ζ)``."""
        n = self.n
        x, xf = zeta[:n], zeta[n:]
        lam = plant_service.memberships_at(self.plant, x)
        a = np.tensordot(lam, self.A, axes=1)
        a_d = np.tensordot(lam, self.A_d, axes=1)
        b = np.tensordot(lam, self.B, axes=1)
        c = np.tensordot(lam, self.C, axes=1)
        e_out = np.tensordot(lam, self.E_out, axes=1)
        e_dout = np.tensordot(lam, self.E_dout, axes=1)
        frule = self._filter_rule(lam)
        a_f, a_tf, e_f, e_tf = frule.A_f, frule.A_tau_f, frule.E_f_out, frule.E_tau_f_out
        if self.perturbations is not None:
            p = self.perturbations[self._interval(t)]
            a, a_d, e_out, e_dout = a + p.A, a_d + p.A_d, e_out + p.E_out, e_dout + p.E_dout
            a_f, a_tf, e_f, e_tf = a_f + p.A_f, a_tf + p.A_tau_f, e_f + p.E_f, e_tf + p.E_tau_f

        delta, d1, d2, tau = self.delays(t)
        x_del = delta * self.history(t - d1)[:n] + (1 - delta) * self.history(t - d2)[:n]
        xf_tau = self.history(t - tau)[n:]
        w = self.omega(t)
        y = self.beta_at(t) @ c @ x

        dx = self.e_inv @ (a @ x + a_d @ x_del + b @ w)
        dxf = self.ef_inv @ (a_f @ xf + a_tf @ xf_tau + frule.B_f @ y)
        z = e_out @ x + e_dout @ x_del
        # feedthrough enters z_f with the sign used by the error system
        zf = e_f @ xf + e_tf @ xf_tau - frule.D_f @ y
        return np.concatenate([dx, dxf]), w, z, zf


def simulate(
    plant: FuzzyPlant,
    filt: FilterRealization | None,
    disturbance: DisturbanceSignal,
    horizon: float,
    step: float,
    seed: SimSeed = None,
    *,
    x0: ArrayLike | None = None,
    xf0: ArrayLike | None = None,
    beta_mode: BetaMode = BetaMode.PER_RUN,
    blowup_cap: float | None = None,
) -> SimulationTrace:
    """Fixed-step RK4 integration of the closed loop by the method of steps.

    Delayed states are read from the stored grid by linear interpolation and
    from ψ before t = 0. δ(t), β and the uncertainty draws are frozen per run
    from ``seed``.

    Raises:
        SingularDescriptorError: when diag(E, E_f) is singular.
        DivergenceError: when ‖ζ‖ crosses the blow-up cap.

    """
    n, q, s, m = plant.dims
    filt = filt or FilterRealization.zero(n, s, m)
    e_bar_rank = mk.numerical_rank(plant.E) + mk.numerical_rank(filt.E_f)
    if e_bar_rank < n + filt.order:
        msg = "simulation needs a nonsingular augmented descriptor matrix"
        raise SingularDescriptorError(msg)
    if step <= 0 or horizon < step:
        msg = f"need step > 0 and horizon >= step, got step={step}, horizon={horizon}"
        raise SimulationError(msg)
    if plant.delays.d_m > 0 and step > plant.delays.d_m / 4 + 1e-15:
        msg = f"step {step} exceeds d_m/4 = {plant.delays.d_m / 4}"
        raise SimulationError(msg)
    cap = blowup_cap or settings.blowup_cap

    ss = _as_seed_sequence(seed)
    path = plant_service.sample_delay_path(plant.delays, horizon, step, seed=_child(ss, 0))
    intervals = path.schedule.values.size
    fault_rng = _child(ss, 1)
    beta_draws = 1 if beta_mode is BetaMode.PER_RUN else intervals
    betas = [plant_service.sample_fault(plant.fault, fault_rng) for _ in range(beta_draws)]
    perturbations = _perturbations(plant, intervals, _child(ss, 2))
    omega = disturbance.realize(horizon, step, q, _child(ss, 3))

    steps = path.t.size - 1
    xf_init = np.zeros(filt.order) if xf0 is None else np.asarray(xf0, dtype=np.float64).reshape(filt.order)
    x_init = plant.history(0.0) if x0 is None else np.asarray(x0, dtype=np.float64).reshape(n)
    history = _History(steps, step, plant, x_init, xf_init)
    loop = _ClosedLoop(plant, filt, path.schedule, betas, perturbations, omega, history)

    zeta = np.concatenate([x_init, xf_init])
    states = np.zeros((steps + 1, zeta.size))
    omegas = np.zeros((steps + 1, q))
    zs = np.zeros((steps + 1, m))
    zfs = np.zeros((steps + 1, m))
    history.push(0, zeta)
    states[0] = zeta
    _, omegas[0], zs[0], zfs[0] = loop.evaluate(0.0, zeta)

    h = step
    for k in range(steps):
        t = path.t[k]
        k1 = loop.evaluate(t, zeta)[0]
        k2 = loop.evaluate(t + h / 2, zeta + h / 2 * k1)[0]
        k3 = loop.evaluate(t + h / 2, zeta + h / 2 * k2)[0]
        k4 = loop.evaluate(t + h, zeta + h * k3)[0]
        zeta = zeta + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        norm = float(np.linalg.norm(zeta))
        if not math.isfinite(norm) or norm > cap:
            msg = f"state norm exceeded {cap:g} at t = {path.t[k + 1]:.6g}"
            raise DivergenceError(msg, float(path.t[k + 1]))
        history.push(k + 1, zeta)
        states[k + 1] = zeta
        _, omegas[k + 1], zs[k + 1], zfs[k + 1] = loop.evaluate(path.t[k + 1], zeta)

    v_sq = np.sum((zs - zfs) ** 2, axis=1)
    w_sq = np.sum(omegas**2, axis=1)
    energy_v = np.concatenate([[0.0], np.cumsum(h / 2 * (v_sq[1:] + v_sq[:-1]))])
    energy_w = np.concatenate([[0.0], np.cumsum(h / 2 * (w_sq[1:] + w_sq[:-1]))])
    beta_series = np.array([np.diag(loop.beta_at(tk)) for tk in path.t])
    return SimulationTrace(
        t=path.t,
        x=states[:, :n],
        xf=states[:, n:],
        delta=path.delta,
        d_eff=path.d_eff,
        tau=path.tau,
        beta=beta_series,
        omega=omegas,
        z=zs,
        zf=zfs,
        energy_v=energy_v,
        energy_w=energy_w,
        seed_key=tuple(int(k) for k in ss.spawn_key),
    )


def empirical_gain(trace: SimulationTrace) -> float:
    """``sqrt(∫vᵀv / ∫ωᵀω)`` over the trace.

    Raises:
        UndefinedGainError: when the disturbance energy is zero.

    """
    e_w = float(trace.energy_w[-1])
    if e_w <= 0.0:
        msg = "disturbance energy is zero; use the stability probe instead"
        raise UndefinedGainError(msg)
    return math.sqrt(float(trace.energy_v[-1]) / e_w)


@dataclass
class MonteCarloSummary:
    """Per-run gains and flags of a batch."""

    gains: list[float]
    diverged: list[bool]
    delta_frequency: list[float]
    betas: list[list[float]]
    seeds: list[tuple[int, ...]]
    gamma: float | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def max_gain(self) -> float:
        """Largest gain over converged runs (``inf`` if any run diverged)."""
        if any(self.diverged):
            return math.inf
        return max(self.gains, default=0.0)

    @property
    def mean_gain(self) -> float:
        """Mean gain over runs that did not diverge."""
        finite = [g for g, d in zip(self.gains, self.diverged, strict=True) if not d]
        return float(np.mean(finite)) if finite else math.nan

    @property
    def within_gamma(self) -> bool | None:
        """Whether every run stayed at or below γ (``None`` without γ)."""
        if self.gamma is None:
            return None
        return self.max_gain <= self.gamma


@dataclass(frozen=True, eq=False)
class _RunOutcome:
    gain: float
    delta_frequency: float
    beta: list[float]
    trace: SimulationTrace | None


def monte_carlo(
    plant: FuzzyPlant,
    filt: FilterRealization | None,
    disturbance: DisturbanceSignal,
    runs: int,
    base_seed: int | None,
    *,
    horizon: float,
    step: float,
    gamma: float | None = None,
    threads: int | None = None,
    traces: list[SimulationTrace] | None = None,
    trace_limit: int | None = None,
    xf0: ArrayLike | None = None,
) -> MonteCarloSummary:
    """Independent seeded runs; a diverged run is flagged, never fatal.

    When ``traces`` is a list, completed traces of the first ``trace_limit``
    runs (all runs when unset) are appended in run order.
    """
    if runs < 1:
        msg = f"runs must be at least 1, got {runs}"
        raise SimulationError(msg)
    seeds = run_seeds(base_seed, runs)
    keep = 0 if traces is None else runs if trace_limit is None else trace_limit

    def one(k: int) -> _RunOutcome | DivergenceError:
        try:
            trace = simulate(plant, filt, disturbance, horizon, step, seeds[k], xf0=xf0)
        except DivergenceError as e:
            return e
        return _RunOutcome(
            gain=empirical_gain(trace),
            delta_frequency=trace.delta_frequency,
            beta=trace.beta[0].tolist(),
            trace=trace if k < keep else None,
        )

    workers = min(threads or settings.threads, runs)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(one, range(runs)))

    summary = MonteCarloSummary(
        gains=[],
        diverged=[],
        delta_frequency=[],
        betas=[],
        seeds=[tuple(int(k) for k in s.spawn_key) for s in seeds],
        gamma=gamma,
    )
    for k, outcome in enumerate(outcomes):
        if isinstance(outcome, DivergenceError):
            logger.warning(f"run {k} diverged at t = {outcome.time:.4g}")
            summary.gains.append(math.inf)
            summary.diverged.append(True)
            summary.delta_frequency.append(math.nan)
            summary.betas.append([])
            summary.errors.append(str(outcome))
            continue
        summary.gains.append(outcome.gain)
        summary.diverged.append(False)
        summary.delta_frequency.append(outcome.delta_frequency)
        summary.betas.append(outcome.beta)
        if traces is not None and outcome.trace is not None:
            traces.append(outcome.trace)
    logger.info(f"monte carlo: {runs} runs, max gain {summary.max_gain:.4g}, mean {summary.mean_gain:.4g}")
    return summary


@dataclass(frozen=True)
class StabilityReport:
    """Zero-input decay of the augmented state."""

    converged: bool
    ratio: float
    final_norm: float


def stability_probe(
    plant: FuzzyPlant,
    filt: FilterRealization | None,
    x0: ArrayLike,
    horizon: float,
    *,
    xf0: ArrayLike | None = None,
    step: float | None = None,
    seed: SimSeed = 0,
) -> StabilityReport:
    """Simulate with ω ≡ 0 and compare ‖ζ(T)‖ with ‖ζ(0)‖."""
    x_init = np.asarray(x0, dtype=np.float64)
    order = filt.order if filt is not None else plant.n
    xf_init = np.zeros(order) if xf0 is None else np.asarray(xf0, dtype=np.float64)
    start = float(np.linalg.norm(np.concatenate([x_init, xf_init])))
    if start == 0.0:
        msg = "stability probe needs a nonzero initial state"
        raise SimulationError(msg)
    h = step if step is not None else default_step(plant, horizon)
    trace = simulate(plant, filt, DisturbanceSignal.zero(), horizon, h, seed, x0=x_init, xf0=xf_init)
    final = float(np.linalg.norm(trace.zeta[-1]))
    ratio = final / start
    return StabilityReport(converged=ratio <= STABILITY_RATIO, ratio=ratio, final_norm=final)


def default_step(plant: FuzzyPlant, horizon: float) -> float:
    """Largest step allowed by the plant's delays (at most 1e-2 s when d_m = 0)."""
    if plant.delays.d_m > 0:
        return plant.delays.d_m / 4
    return min(1e-2, horizon / 100)
