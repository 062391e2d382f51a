"""Model and filter file schemas."""

from pathlib import Path
from typing import Any, Literal, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.matrixkit import MatrixKitError
from src.models.filter import FilterRealization, FilterRule, RecoveryDiagnostics
from src.models.plant import (
    DelayGenerator,
    DelaySpec,
    FuzzyPlant,
    FuzzyRule,
    InvalidModelError,
    MembershipModel,
    SensorFaultModel,
    UncertaintyStructure,
)
from src.models.trace import DisturbanceKind, DisturbanceSignal


MatrixField = list[list[float]]


def _matrix(m: np.ndarray) -> MatrixField:
    return np.asarray(m, dtype=np.float64).tolist()


class RuleSchema(BaseModel):
    """Local model matrices of one rule, row-major."""

    A: MatrixField
    A_d: MatrixField
    B: MatrixField
    C: MatrixField
    E_out: MatrixField
    E_dout: MatrixField | None = None


class MembershipSchema(BaseModel):
    """Membership family with its parameters and derivative bounds."""

    kind: Literal["sector-x1-squared", "table"]
    params: dict[str, Any] = Field(default_factory=dict)
    rho: list[float]


class PlantSchema(BaseModel):
    """Descriptor matrix, rules and memberships."""

    name: str = "plant"
    E: MatrixField
    rules: list[RuleSchema] = Field(..., min_length=1)
    membership: MembershipSchema
    initial: list[float] | None = Field(default=None, description="Constant initial function ψ")


class GeneratorSchema(BaseModel):
    """Sinusoidal delay trajectory."""

    offset: float
    amplitude: float = 0.0
    frequency: float = 0.0
    phase: float = 0.0


class DelaySchema(BaseModel):
    """Two-interval delay bounds, derivative bounds and trajectory generators."""

    d_m: float = Field(..., ge=0)
    d_0: float
    d_M: float
    sigma1: float = Field(..., ge=0)
    sigma2: float = Field(..., ge=0)
    sigma3: float = Field(..., ge=0)
    tau_bar: float = Field(..., gt=0)
    delta0: float = Field(..., ge=0, le=1)
    generators: dict[Literal["d1", "d2", "tau"], GeneratorSchema] | None = None


class FaultSchema(BaseModel):
    """Per-channel sensor gain band."""

    beta_lower: list[float]
    beta_upper: list[float]


class UncertaintySchema(BaseModel):
    """Linear-fractional uncertainty factors."""

    M: MatrixField
    N1: MatrixField
    N2: MatrixField
    N3: MatrixField
    N4: MatrixField
    N5: MatrixField
    N6: MatrixField
    N7: MatrixField
    N8: MatrixField
    L: MatrixField | None = None
    M_out: MatrixField | None = None
    enabled: bool = True


class SolveSchema(BaseModel):
    """Synthesis settings."""

    design: Literal["nominal", "robust"] = Field(default="nominal", description="robust adds the ε-scaled uncertainty blocks")
    gamma: float | Literal["min"] = "min"
    eps_grid: list[float] | None = Field(default=None, description="Exponents a of the 10^a grid")
    fault_handling: Literal["nominal", "vertices"] = "nominal"
    gamma_bracket: tuple[float, float] | None = None
    margin_tol: float | None = Field(default=None, gt=0)
    step_tol: float | None = Field(default=None, gt=0)
    max_iterations: int | None = Field(default=None, ge=1)


class DisturbanceSchema(BaseModel):
    """Disturbance description."""

    kind: Literal["pulse", "white-noise", "zero", "table"] = "pulse"
    pulses: list[tuple[float, float, float]] = Field(default_factory=lambda: [(5.0, 10.0, 1.0)])
    power: float | None = Field(default=None, ge=0)
    seed: int | None = None
    t: list[float] = Field(default_factory=list)
    values: list[float] = Field(default_factory=list)

    def to_signal(self, default_power: float) -> DisturbanceSignal:
        """Runtime disturbance."""
        match DisturbanceKind(self.kind):
            case DisturbanceKind.PULSE:
                return DisturbanceSignal.pulse(self.pulses)
            case DisturbanceKind.WHITE_NOISE:
                power = default_power if self.power is None else self.power
                return DisturbanceSignal.white_noise(power, self.seed)
            case DisturbanceKind.TABLE:
                return DisturbanceSignal.table(self.t, self.values)
            case DisturbanceKind.ZERO:
                return DisturbanceSignal.zero()


class SimSchema(BaseModel):
    """Simulation settings."""

    horizon: float = Field(default=30.0, gt=0)
    step: float | None = Field(default=None, gt=0)
    disturbance: DisturbanceSchema = Field(default_factory=DisturbanceSchema)
    runs: int = Field(default=100, ge=1)
    seed: int = 0
    xf0: list[float] | None = None


class ModelFile(BaseModel):
    """Self-describing plant, solve and simulation configuration."""

    model_config = ConfigDict(extra="forbid")

    plant: PlantSchema
    delays: DelaySchema
    fault: FaultSchema
    uncertainty: UncertaintySchema | None = None
    solve: SolveSchema = Field(default_factory=SolveSchema)
    sim: SimSchema = Field(default_factory=SimSchema)

    @model_validator(mode="after")
    def check_dimensions(self) -> Self:
        """Cross-check every dimension against rule 1."""
        try:
            self.to_plant()
        except InvalidModelError as e:
            msg = f"{e.field_path}: {e}"
            raise ValueError(msg) from e
        return self

    def _membership(self) -> MembershipModel:
        spec = self.plant.membership
        params = spec.params
        if spec.kind == "sector-x1-squared":
            return MembershipModel.sector_square(
                index=int(params.get("index", 0)),
                bound=float(params.get("bound", 3.0)),
                rho=spec.rho,
            )
        if "points" not in params or "activations" not in params:
            msg = "table membership needs 'points' and 'activations'"
            raise InvalidModelError(msg, "plant.membership.params")
        return MembershipModel.table(
            points=params["points"],
            activations=params["activations"],
            rho=spec.rho,
            index=int(params.get("index", 0)),
        )

    def _delays(self) -> DelaySpec:
        d = self.delays
        sigma = (d.sigma1, d.sigma2, d.sigma3)
        if d.generators is None:
            return DelaySpec.constant(d.d_m, d.d_0, d.d_M, d.tau_bar, d.delta0, sigma)
        missing = {"d1", "d2", "tau"} - set(d.generators)
        if missing:
            msg = f"missing generators {sorted(missing)}"
            raise InvalidModelError(msg, "delays.generators")
        gens = {k: DelayGenerator(**g.model_dump()) for k, g in d.generators.items()}
        return DelaySpec(
            d_m=d.d_m,
            d_0=d.d_0,
            d_M=d.d_M,
            sigma=sigma,
            tau_bar=d.tau_bar,
            delta0=d.delta0,
            d1=gens["d1"],
            d2=gens["d2"],
            tau=gens["tau"],
        )

    def _uncertainty(self, n: int, m: int) -> UncertaintyStructure:
        u = self.uncertainty
        if u is None:
            return UncertaintyStructure.disabled(n, m)
        M = np.asarray(u.M, dtype=np.float64)
        w = M.shape[1] if M.ndim == 2 else 0
        return UncertaintyStructure(
            M=M,
            N=tuple(np.asarray(getattr(u, f"N{k}"), dtype=np.float64) for k in range(1, 9)),
            L=np.zeros((w, w)) if u.L is None else np.asarray(u.L, dtype=np.float64),
            M_out=np.zeros((m, w)) if u.M_out is None else np.asarray(u.M_out, dtype=np.float64),
            enabled=u.enabled,
        )

    def to_plant(self) -> FuzzyPlant:
        """Build the runtime plant.

        Raises:
            InvalidModelError: naming the offending field path.

        """
        rules = []
        for i, r in enumerate(self.plant.rules):
            try:
                rules.append(FuzzyRule.from_arrays(r.A, r.A_d, r.B, r.C, r.E_out, r.E_dout))
            except (ValueError, MatrixKitError) as e:
                msg = f"malformed matrix in rule {i}: {e}"
                raise InvalidModelError(msg, f"plant.rules[{i}]") from e
        n, _, _, m = rules[0].dims
        return FuzzyPlant(
            E=np.asarray(self.plant.E, dtype=np.float64),
            rules=tuple(rules),
            membership=self._membership(),
            delays=self._delays(),
            uncertainty=self._uncertainty(n, m),
            fault=SensorFaultModel(tuple(self.fault.beta_lower), tuple(self.fault.beta_upper)),
            initial=None if self.plant.initial is None else np.asarray(self.plant.initial, dtype=np.float64),
            name=self.plant.name,
        )

    @classmethod
    def from_plant(
        cls,
        plant: FuzzyPlant,
        solve: SolveSchema | None = None,
        sim: SimSchema | None = None,
    ) -> "ModelFile":
        """Serialize a runtime plant; callable initial functions are not representable."""
        if plant.membership.kind not in {"sector-x1-squared", "table"}:
            msg = f"membership kind {plant.membership.kind!r} cannot be serialized"
            raise InvalidModelError(msg, "plant.membership")
        if callable(plant.initial):
            msg = "callable initial functions cannot be serialized"
            raise InvalidModelError(msg, "plant.initial")
        d = plant.delays
        u = plant.uncertainty
        return cls(
            plant=PlantSchema(
                name=plant.name,
                E=_matrix(plant.E),
                rules=[
                    RuleSchema(
                        A=_matrix(r.A),
                        A_d=_matrix(r.A_d),
                        B=_matrix(r.B),
                        C=_matrix(r.C),
                        E_out=_matrix(r.E_out),
                        E_dout=_matrix(r.E_dout),
                    )
                    for r in plant.rules
                ],
                membership=MembershipSchema(
                    kind=plant.membership.kind,  # type: ignore[arg-type]
                    params=dict(plant.membership.params),
                    rho=list(plant.membership.rho),
                ),
                initial=None if plant.initial is None else np.asarray(plant.initial).reshape(-1).tolist(),
            ),
            delays=DelaySchema(
                d_m=d.d_m,
                d_0=d.d_0,
                d_M=d.d_M,
                sigma1=d.sigma[0],
                sigma2=d.sigma[1],
                sigma3=d.sigma[2],
                tau_bar=d.tau_bar,
                delta0=d.delta0,
                generators={
                    "d1": GeneratorSchema(**vars(d.d1)),
                    "d2": GeneratorSchema(**vars(d.d2)),
                    "tau": GeneratorSchema(**vars(d.tau)),
                },
            ),
            fault=FaultSchema(beta_lower=list(plant.fault.lower), beta_upper=list(plant.fault.upper)),
            uncertainty=UncertaintySchema(
                M=_matrix(u.M),
                **{f"N{k + 1}": _matrix(nk) for k, nk in enumerate(u.N)},
                L=_matrix(u.L),
                M_out=_matrix(u.M_out),
                enabled=u.enabled,
            ),
            solve=solve or SolveSchema(),
            sim=sim or SimSchema(),
        )

    def write(self, path: Path) -> Path:
        """Write as indented JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "ModelFile":
        """Parse and validate a model file."""
        return cls.model_validate_json(path.read_text(encoding="utf-8"))


class FilterRuleSchema(BaseModel):
    """Filter matrices of one rule."""

    A_f: MatrixField
    A_tau_f: MatrixField
    B_f: MatrixField
    E_f_out: MatrixField
    E_tau_f_out: MatrixField
    D_f: MatrixField


class FilterFile(BaseModel):
    """Recovered filter, as written by ``synth``."""

    rules: list[FilterRuleSchema] = Field(..., min_length=1)
    E_f: MatrixField
    coupling: list[MatrixField] | None = None
    gamma: float | None = None
    diagnostics: dict[str, list[float]] | None = None

    @classmethod
    def from_realization(cls, filt: FilterRealization) -> "FilterFile":
        """Serialize a runtime filter."""
        diag = filt.diagnostics
        return cls(
            rules=[
                FilterRuleSchema(**{name: _matrix(getattr(r, name)) for name in FilterRuleSchema.model_fields})
                for r in filt.rules
            ],
            E_f=_matrix(filt.E_f),
            coupling=None if filt.coupling is None else [_matrix(u) for u in filt.coupling],
            gamma=filt.gamma,
            diagnostics=None
            if diag is None
            else {"cond_y": list(diag.cond_y), "cond_coupling": list(diag.cond_coupling), "cond_wy": list(diag.cond_wy)},
        )

    def to_realization(self) -> FilterRealization:
        """Build the runtime filter."""
        diag = None
        if self.diagnostics is not None:
            diag = RecoveryDiagnostics(
                tuple(self.diagnostics.get("cond_y", [])),
                tuple(self.diagnostics.get("cond_coupling", [])),
                tuple(self.diagnostics.get("cond_wy", [])),
            )
        return FilterRealization(
            rules=tuple(
                FilterRule(**{k: np.asarray(v, dtype=np.float64) for k, v in r.model_dump().items()}) for r in self.rules
            ),
            E_f=np.asarray(self.E_f, dtype=np.float64),
            coupling=None if self.coupling is None else tuple(np.asarray(u, dtype=np.float64) for u in self.coupling),
            diagnostics=diag,
            gamma=self.gamma,
        )

    def write(self, path: Path) -> Path:
        """Write as indented JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "FilterFile":
        """Parse a filter file."""
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
