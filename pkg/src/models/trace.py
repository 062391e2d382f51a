"""Disturbance signals and simulation traces."""

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from src.models.plant import InvalidModelError


Signal = Callable[[float], NDArray[np.float64]]


class DisturbanceKind(StrEnum):
    """Shape family of an exogenous disturbance."""

    PULSE = "pulse"
    WHITE_NOISE = "white-noise"
    ZERO = "zero"
    TABLE = "table"


@dataclass(frozen=True)
class DisturbanceSignal:
    """Disturbance ω(t), identical on every input channel.

    Pulses are ``(t_on, t_off, level)`` triples, ordered and non-overlapping.
    White noise is piecewise constant over the integration step with
    variance ``power / step``; its realization comes from the run's generator
    unless ``seed`` pins it.
    """

    kind: DisturbanceKind
    pulses: tuple[tuple[float, float, float], ...] = ()
    power: float = 0.0
    seed: int | None = None
    table_t: tuple[float, ...] = ()
    table_values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        """Check ordering of pulses and tables."""
        last_off = -np.inf
        for on, off, _ in self.pulses:
            if off < on or on < last_off:
                msg = f"pulse ({on}, {off}) overlaps or is out of order"
                raise InvalidModelError(msg, "sim.disturbance.pulses")
            last_off = off
        if self.power < 0:
            msg = "noise power must be nonnegative"
            raise InvalidModelError(msg, "sim.disturbance.power")
        if len(self.table_t) != len(self.table_values):
            msg = "disturbance table needs one value per time point"
            raise InvalidModelError(msg, "sim.disturbance.table")
        if len(self.table_t) > 1 and np.any(np.diff(self.table_t) <= 0):
            msg = "disturbance table times must be increasing"
            raise InvalidModelError(msg, "sim.disturbance.table")

    @classmethod
    def zero(cls) -> "DisturbanceSignal":
        """ω ≡ 0."""
        return cls(DisturbanceKind.ZERO)

    @classmethod
    def pulse(cls, pulses: Sequence[tuple[float, float, float]]) -> "DisturbanceSignal":
        """Rectangular pulses."""
        return cls(DisturbanceKind.PULSE, pulses=tuple((float(a), float(b), float(c)) for a, b, c in pulses))

    @classmethod
    def white_noise(cls, power: float, seed: int | None = None) -> "DisturbanceSignal":
        """Band-limited white noise."""
        return cls(DisturbanceKind.WHITE_NOISE, power=float(power), seed=seed)

    @classmethod
    def table(cls, t: Sequence[float], values: Sequence[float]) -> "DisturbanceSignal":
        """Linear interpolation of tabulated values, held at the ends."""
        return cls(DisturbanceKind.TABLE, table_t=tuple(map(float, t)), table_values=tuple(map(float, values)))

    @classmethod
    def example_pulse(cls) -> "DisturbanceSignal":
        """ω = 1 on [5, 10] s, zero elsewhere."""
        return cls.pulse([(5.0, 10.0, 1.0)])

    def realize(self, horizon: float, step: float, channels: int, rng: np.random.Generator) -> Signal:
        """Bind the signal to a time grid and a random stream."""
        ones = np.ones(channels)
        match self.kind:
            case DisturbanceKind.ZERO:
                zero = np.zeros(channels)
                return lambda _t: zero
            case DisturbanceKind.PULSE:
                pulses = self.pulses

                def pulse(t: float) -> NDArray[np.float64]:
                    level = sum((lv for on, off, lv in pulses if on <= t <= off), 0.0)
                    return level * ones

                return pulse
            case DisturbanceKind.TABLE:
                ts, vs = np.asarray(self.table_t), np.asarray(self.table_values)
                return lambda t: float(np.interp(t, ts, vs)) * ones
            case DisturbanceKind.WHITE_NOISE:
                source = np.random.default_rng(self.seed) if self.seed is not None else rng
                count = round(horizon / step) + 1
                samples = source.normal(0.0, np.sqrt(self.power / step), (count, channels))

                def noise(t: float) -> NDArray[np.float64]:
                    return samples[min(max(int(t / step + 1e-9), 0), count - 1)]

                return noise

    def to_dict(self) -> dict[str, Any]:
        """Model-file representation."""
        match self.kind:
            case DisturbanceKind.PULSE:
                return {"kind": self.kind.value, "pulses": [list(p) for p in self.pulses]}
            case DisturbanceKind.WHITE_NOISE:
                return {"kind": self.kind.value, "power": self.power, "seed": self.seed}
            case DisturbanceKind.TABLE:
                return {"kind": self.kind.value, "t": list(self.table_t), "values": list(self.table_values)}
            case DisturbanceKind.ZERO:
                return {"kind": self.kind.value}


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    """Closed-loop signals on a uniform grid, with running energies."""

    t: NDArray[np.float64]
    x: NDArray[np.float64]
    xf: NDArray[np.float64]
    delta: NDArray[np.int8]
    d_eff: NDArray[np.float64]
    tau: NDArray[np.float64]
    beta: NDArray[np.float64]
    omega: NDArray[np.float64]
    z: NDArray[np.float64]
    zf: NDArray[np.float64]
    energy_v: NDArray[np.float64]
    energy_w: NDArray[np.float64]
    seed_key: tuple[int, ...] = field(default=())

    @property
    def v(self) -> NDArray[np.float64]:
        """Filtering error z - z_f."""
        return self.z - self.zf

    @property
    def step(self) -> float:
        """Grid spacing."""
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    @property
    def zeta(self) -> NDArray[np.float64]:
        """Augmented state (x, x_f)."""
        return np.hstack([self.x, self.xf])

    @property
    def delta_frequency(self) -> float:
        """Fraction of grid points with δ = 1."""
        return float(np.mean(self.delta))

    def header(self) -> list[str]:
        """CSV column names."""
        cols = ["t"]
        cols += [f"x{k + 1}" for k in range(self.x.shape[1])]
        cols += [f"xf{k + 1}" for k in range(self.xf.shape[1])]
        cols += ["delta", "d_eff", "tau"]
        cols += [f"omega{k + 1}" for k in range(self.omega.shape[1])]
        cols += [f"z{k + 1}" for k in range(self.z.shape[1])]
        cols += [f"zf{k + 1}" for k in range(self.zf.shape[1])]
        cols += [f"v{k + 1}" for k in range(self.z.shape[1])]
        cols += ["E_v", "E_w"]
        return cols

    def to_csv(self, path: Path) -> Path:
        """Write the trace with a header row; values in round-trip precision."""
        data = np.column_stack(
            [
                self.t,
                self.x,
                self.xf,
                self.delta.astype(np.float64),
                self.d_eff,
                self.tau,
                self.omega,
                self.z,
                self.zf,
                self.v,
                self.energy_v,
                self.energy_w,
            ],
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, data, delimiter=",", header=",".join(self.header()), comments="", fmt="%.17g")
        return path
