"""Pipeline service: the end-to-end flows behind each command."""

import math
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger
from pydantic import ValidationError

from src.core.config import settings
from src.core.matrixkit import DimensionMismatchError
from src.models.filter import FilterRealization
from src.models.lmi import LmiProblem
from src.models.plant import DcMotorParameters, FuzzyPlant, InvalidModelError
from src.models.trace import DisturbanceKind, SimulationTrace
from src.schemas.model_file import FilterFile, ModelFile, SolveSchema
from src.schemas.report import (
    AdmissibilityRow,
    MonteCarloReport,
    ReportStatus,
    RunReport,
    SolverSummary,
    StabilitySummary,
    finite_or_none,
    worst_status,
)
from src.services.lmi_service import (
    FaultHandling,
    LmiSynthesisError,
    RecoveryDegenerateError,
    assemble_analysis,
    assemble_robust,
    assemble_synthesis,
    recover_from_solution,
)
from src.services.plant_service import PlantModelError, build_example1, check_admissible
from src.services.simulation_service import (
    SingularDescriptorError,
    default_step,
    monte_carlo,
    stability_probe,
)
from src.services.solver_service import (
    BracketFailureError,
    LmiSolver,
    SolveOptions,
    SolveResult,
    SolveStatus,
    eps_grid_search,
    log_grid,
    min_gamma,
)


BUNDLED_DIR = Path(__file__).resolve().parents[1] / "bundled"
BUNDLED_MODELS = {
    "example1": "example1.json",
    "example1-case1-mu": "example1_case1_mu.json",
    "dc-motor": "dc_motor.json",
    "dc-motor-uncertain": "dc_motor_uncertain.json",
}
EXAMPLES = ("example1", "dc-motor")
EXAMPLE1_DELAYS = (0.5, 0.6, 0.8, 1.0)
EXAMPLE1_PRIOR = (0.31, 0.33, 0.37, 0.44)
PRIOR_TOLERANCE = 1.05
DEFAULT_GAMMA_BRACKET = (0.0, 1.0)
DESIGNS = ("nominal", "robust")


class PipelineError(Exception):
    """Pipeline service error."""


class UsageError(PipelineError):
    """Arguments that cannot be acted on."""


class UnknownExampleError(UsageError):
    """Example name not among the bundled examples."""


class ModelDataError(PipelineError):
    """Model or filter file failed to parse or validate."""

    def __init__(self, message: str, errors: list[str] | None = None) -> None:
        """Keep one ``location: message`` line per problem."""
        super().__init__(message)
        self.errors = errors or []


def status_for(exc: BaseException) -> ReportStatus:
    """Report status of an exception escaping a command."""
    match exc:
        case UsageError():
            return ReportStatus.USAGE_ERROR
        case (
            ModelDataError()
            | InvalidModelError()
            | DimensionMismatchError()
            | PlantModelError()
            | LmiSynthesisError()
            | SingularDescriptorError()
        ):
            return ReportStatus.DATA_ERROR
        case BracketFailureError():
            return ReportStatus.INFEASIBLE
        case _:
            # solver, matrix and integration failures alike
            return ReportStatus.NUMERICAL_FAILURE


@dataclass
class RunContext:
    """Global options shared by every command."""

    out_dir: Path = Path("fhs-out")
    seed: int | None = None
    tol: float | None = None
    threads: int | None = None
    trace_limit: int | None = None
    iteration_log: bool = False
    argv: list[str] = field(default_factory=list)

    def solve_options(self, schema: SolveSchema | None = None, *, log_iterations: bool = True) -> SolveOptions:
        """Settings defaults, overridden by the model file and then by ``--tol``."""
        overrides: dict[str, Any] = {}
        if schema is not None:
            for name in ("margin_tol", "step_tol", "max_iterations"):
                value = getattr(schema, name)
                if value is not None:
                    overrides[name] = value
        if self.tol is not None:
            overrides["margin_tol"] = self.tol
        if self.iteration_log and log_iterations:
            overrides["iteration_log"] = self.out_dir / "solver_iterations.csv"
        return SolveOptions(**overrides)

    def describe(self) -> dict[str, Any]:
        """JSON-ready echo for the report."""
        return {
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "tol": self.tol,
            "threads": self.threads or settings.threads,
        }


@contextmanager
def _timed(timings: dict[str, float], stage: str) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = round(time.perf_counter() - start, 6)


def _validation_lines(e: ValidationError) -> list[str]:
    lines = []
    for error in e.errors():
        location = " -> ".join(str(segment) for segment in error.get("loc", ()))
        lines.append(f"{location or 'model'}: {error.get('msg', 'invalid value')}")
    return lines


def resolve_model_path(source: str | Path) -> Path:
    """A path on disk, or the bundled model of that name."""
    path = Path(source)
    if path.is_file():
        return path
    bundled = BUNDLED_MODELS.get(str(source))
    if bundled is not None:
        return BUNDLED_DIR / bundled
    msg = f"model file {source} not found (bundled names: {', '.join(BUNDLED_MODELS)})"
    raise UsageError(msg)


def load_model(source: str | Path) -> ModelFile:
    """Parse and cross-check a model file.

    Raises:
        ModelDataError: listing every offending field path.

    """
    path = resolve_model_path(source)
    try:
        return ModelFile.load(path)
    except ValidationError as e:
        msg = f"invalid model file {path}"
        raise ModelDataError(msg, _validation_lines(e)) from e


def load_filter(path: Path) -> FilterFile:
    """Parse a filter file written by ``synth`` or by hand."""
    if not path.is_file():
        msg = f"filter file {path} not found"
        raise UsageError(msg)
    try:
        return FilterFile.load(path)
    except ValidationError as e:
        msg = f"invalid filter file {path}"
        raise ModelDataError(msg, _validation_lines(e)) from e


def _write_problem(problem: LmiProblem, path: Path, report: RunReport) -> None:
    """Plain-text listing of the assembled LMIs next to the report."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(problem.dump(), encoding="utf-8")
    report.artifacts.append(str(path))


def _solver_summary(problem: LmiProblem, result: SolveResult, eps: tuple[float, float] | None = None) -> SolverSummary:
    return SolverSummary(
        status=result.status.value,
        margin=finite_or_none(result.margin),
        iterations=result.iterations,
        n_dec=problem.registry.size,
        constraints=len(problem.constraints),
        objective=finite_or_none(result.objective),
        equality_residual=finite_or_none(result.equality_residual) or 0.0,
        worst=[(name, m) for name, m in result.worst() if math.isfinite(m)],
        eps=eps,
    )


def _solve_status(result: SolveResult) -> ReportStatus:
    if result.status is SolveStatus.FEASIBLE:
        return ReportStatus.OK
    if result.status in {SolveStatus.NUMERICAL_FAILURE, SolveStatus.UNBOUNDED}:
        return ReportStatus.NUMERICAL_FAILURE
    return ReportStatus.INFEASIBLE


def _fault_handling(model: ModelFile, vertices: bool) -> FaultHandling:
    if vertices or model.solve.fault_handling == "vertices":
        return FaultHandling.VERTICES
    return FaultHandling.NOMINAL


def _base_report(command: str, ctx: RunContext, model: ModelFile | None = None, **extra: Any) -> RunReport:
    config: dict[str, Any] = {"run": ctx.describe(), **extra}
    if model is not None:
        config["model"] = model.model_dump(mode="json")
    return RunReport(command=command, argv=ctx.argv, config=config)


def validate_model(source: str | Path, ctx: RunContext) -> RunReport:
    """Schema check, dimension audit and per-rule admissibility."""
    report = _base_report("validate", ctx, source=str(source))
    with _timed(report.timings, "validate"):
        model = load_model(source)
        plant = model.to_plant()
    report.config["model"] = model.model_dump(mode="json")
    failing = []
    for i, rule in enumerate(plant.rules):
        check = check_admissible(plant.E, rule.A)
        report.admissibility.append(
            AdmissibilityRow(
                rule=i + 1,
                regular=check.regular,
                impulse_free=check.impulse_free,
                degree=check.degree,
                rank_e=check.rank_e,
                admissible=check.admissible,
            ),
        )
        if not check.admissible:
            failing.append(i + 1)
    n, q, s, m = plant.dims
    report.messages.append(f"{plant.name}: n={n}, q={q}, s={s}, m={m}, rules={plant.rule_count}, rank E={plant.e_rank}")
    if failing:
        return report.finalize(ReportStatus.DATA_ERROR, f"rules {failing} are not admissible (regular and impulse-free)")
    return report.finalize(ReportStatus.OK, "all rules admissible")


@dataclass
class _SynthesisSolve:
    problem: LmiProblem
    result: SolveResult
    gamma: float | None
    eps: tuple[float, float] | None = None
    notes: list[str] = field(default_factory=list)


def _solve_nominal(
    plant: FuzzyPlant,
    level: float | str,
    handling: FaultHandling,
    solver: LmiSolver,
    bracket: tuple[float, float] | None,
) -> _SynthesisSolve:
    if level == "min":
        search = min_gamma(
            lambda g: assemble_synthesis(plant, g, fault_handling=handling),
            bracket or DEFAULT_GAMMA_BRACKET,
            solver=solver,
        )
        notes = [f"gamma bisection: {search.probes} probes"]
        if not search.monotone:
            notes.append("feasibility was not monotone in gamma above the reported level")
        return _SynthesisSolve(search.problem, search.result, search.gamma, notes=notes)
    problem = assemble_synthesis(plant, float(level), fault_handling=handling)
    return _SynthesisSolve(problem, solver.solve_feasibility(problem), float(level))


def _solve_robust(
    plant: FuzzyPlant,
    level: float | str,
    handling: FaultHandling,
    solver: LmiSolver,
    exponents: list[float] | None,
    threads: int | None,
) -> _SynthesisSolve:
    gamma = None if level == "min" else float(level)
    grid = log_grid(exponents)
    search = eps_grid_search(
        lambda e1, e2: assemble_robust(plant, gamma, e1, e2, fault_handling=handling),
        grid,
        solver=solver,
        threads=threads,
    )
    best = search.best
    feasible = sum(p.result.feasible for p in search.points)
    notes = [f"eps grid: {feasible}/{len(search.points)} pairs feasible, best ({best.eps1:g}, {best.eps2:g})"]
    if gamma is None and best.result.objective is not None and best.result.objective >= 0:
        gamma = math.sqrt(best.result.objective)
    return _SynthesisSolve(best.problem, best.result, gamma, (best.eps1, best.eps2), notes)


def run_synthesis(
    source: str | Path,
    ctx: RunContext,
    *,
    design: str | None = None,
    gamma: float | str | None = None,
    eps_exponents: list[float] | None = None,
    vertices: bool = False,
) -> tuple[RunReport, FilterRealization | None]:
    """Assemble, solve, verify and recover; write the filter file.

    Returns the report and, on success, the recovered filter.
    """
    model = load_model(source)
    plant = model.to_plant()
    design = design or model.solve.design
    if design not in DESIGNS:
        msg = f"design must be one of {', '.join(DESIGNS)}, got {design!r}"
        raise UsageError(msg)
    level: float | str = model.solve.gamma if gamma is None else gamma
    if level != "min" and float(level) <= 0:
        msg = f"gamma must be positive or 'min', got {level}"
        raise UsageError(msg)
    exponents = eps_exponents if eps_exponents is not None else model.solve.eps_grid
    handling = _fault_handling(model, vertices)
    single_solve = design == "nominal" and level != "min"
    solver = LmiSolver(ctx.solve_options(model.solve, log_iterations=single_solve))
    report = _base_report(
        "synth",
        ctx,
        model,
        design=design,
        gamma=level,
        eps_exponents=exponents,
        fault_handling=handling.value,
        solve_options=solver.options.model_dump(mode="json"),
    )

    for i, rule in enumerate(plant.rules):
        if not check_admissible(plant.E, rule.A).admissible:
            logger.warning(f"rule {i + 1} of {plant.name} is not admissible on its own")

    with _timed(report.timings, "solve"):
        if design == "nominal":
            solve = _solve_nominal(plant, level, handling, solver, model.solve.gamma_bracket)
        else:
            solve = _solve_robust(plant, level, handling, solver, exponents, ctx.threads)
    report.solver = _solver_summary(solve.problem, solve.result, solve.eps)
    _write_problem(solve.problem, ctx.out_dir / "synth_problem.txt", report)
    report.gamma = finite_or_none(solve.gamma)
    report.messages.extend(solve.notes)
    status = _solve_status(solve.result)
    if status is not ReportStatus.OK:
        worst = ", ".join(f"{name}={m:.3e}" for name, m in solve.result.worst(3))
        return report.finalize(status, f"synthesis {solve.result.status.value}; tightest: {worst}"), None

    with _timed(report.timings, "recover"):
        try:
            filt = recover_from_solution(solve.problem, solve.result.x)
        except RecoveryDegenerateError as e:
            report.diagnostics = {k: v for k, v in e.diagnostics.items() if math.isfinite(v)}
            return report.finalize(ReportStatus.RECOVERY_FAILURE, str(e)), None
    filter_file = FilterFile.from_realization(filt)
    report.filter = filter_file
    if filt.diagnostics is not None:
        report.diagnostics = {
            "max_cond_y": max(filt.diagnostics.cond_y),
            "max_cond_coupling": max(filt.diagnostics.cond_coupling),
        }
    path = filter_file.write(ctx.out_dir / "filter.json")
    report.artifacts.append(str(path))
    logger.success(f"filter recovered for {plant.name} at gamma={filt.gamma}")
    return report.finalize(ReportStatus.OK, f"filter written to {path}"), filt


def synthesize(
    source: str | Path,
    ctx: RunContext,
    *,
    design: str | None = None,
    gamma: float | str | None = None,
    eps_exponents: list[float] | None = None,
    vertices: bool = False,
) -> RunReport:
    """Filter synthesis report (see :func:`run_synthesis`)."""
    report, _ = run_synthesis(source, ctx, design=design, gamma=gamma, eps_exponents=eps_exponents, vertices=vertices)
    return report


def _declared_gamma(gamma: float | None, filter_file: FilterFile | None, model: ModelFile) -> float | None:
    if gamma is not None:
        return gamma
    if filter_file is not None and filter_file.gamma is not None:
        return filter_file.gamma
    if isinstance(model.solve.gamma, float):
        return model.solve.gamma
    return None


def verify(
    source: str | Path,
    filter_path: Path,
    ctx: RunContext,
    *,
    gamma: float | None = None,
    vertices: bool = False,
) -> RunReport:
    """Analysis LMIs for a given filter at level γ."""
    model = load_model(source)
    filter_file = load_filter(filter_path)
    level = _declared_gamma(gamma, filter_file, model)
    if level is None or level <= 0:
        msg = "verify needs a positive --gamma when neither the filter nor the model declares one"
        raise UsageError(msg)
    plant = model.to_plant()
    filt = filter_file.to_realization()
    handling = _fault_handling(model, vertices)
    solver = LmiSolver(ctx.solve_options(model.solve))
    report = _base_report(
        "verify",
        ctx,
        model,
        filter=str(filter_path),
        gamma=level,
        fault_handling=handling.value,
        solve_options=solver.options.model_dump(mode="json"),
    )
    report.gamma = level
    report.filter = filter_file
    with _timed(report.timings, "assemble"):
        problem = assemble_analysis(plant, filt, level, fault_handling=handling)
    with _timed(report.timings, "solve"):
        result = solver.solve_feasibility(problem)
    report.solver = _solver_summary(problem, result)
    _write_problem(problem, ctx.out_dir / "verify_problem.txt", report)
    return report.finalize(_solve_status(result), f"analysis at gamma={level:g}: {result.status.value}")


def _probe_start(plant: FuzzyPlant, model: ModelFile, order: int) -> tuple[np.ndarray, np.ndarray]:
    x0 = plant.history(0.0)
    if not np.any(x0):
        x0 = np.ones(plant.n)
    xf0 = np.zeros(order) if model.sim.xf0 is None else np.asarray(model.sim.xf0, dtype=np.float64)
    return x0, xf0


def _write_traces(traces: list[SimulationTrace], out_dir: Path) -> list[str]:
    written = []
    for trace in traces:
        run = trace.seed_key[-1] if trace.seed_key else len(written)
        written.append(str(trace.to_csv(out_dir / "traces" / f"run_{run:04d}.csv")))
    return written


def simulate_batch(
    source: str | Path,
    filter_path: Path | None,
    ctx: RunContext,
    *,
    runs: int | None = None,
    seed: int | None = None,
    gamma: float | None = None,
    filt: FilterRealization | None = None,
) -> RunReport:
    """Monte Carlo gains plus the zero-input stability probe.

    Without a filter the zero filter is used, so the error output is z. A
    zero disturbance skips the batch and runs the probe only.
    """
    model = load_model(source)
    plant = model.to_plant()
    filter_file = None
    if filt is None and filter_path is not None:
        filter_file = load_filter(filter_path)
        filt = filter_file.to_realization()
    elif filt is not None:
        filter_file = FilterFile.from_realization(filt)
    level = _declared_gamma(gamma, filter_file, model)
    runs = runs or model.sim.runs
    base_seed = seed if seed is not None else ctx.seed if ctx.seed is not None else model.sim.seed
    horizon = model.sim.horizon
    step = model.sim.step or default_step(plant, horizon)
    disturbance = model.sim.disturbance.to_signal(settings.white_noise_power)
    report = _base_report(
        "simulate",
        ctx,
        model,
        filter=None if filter_path is None else str(filter_path),
        runs=runs,
        seed=base_seed,
        step=step,
        gamma=level,
    )
    report.gamma = level
    report.filter = filter_file
    order = filt.order if filt is not None else plant.n

    statuses = []
    if disturbance.kind is DisturbanceKind.ZERO:
        report.messages.append("zero disturbance: gain undefined, stability probe only")
    else:
        traces: list[SimulationTrace] = []
        limit = settings.max_trace_files if ctx.trace_limit is None else ctx.trace_limit
        with _timed(report.timings, "monte_carlo"):
            summary = monte_carlo(
                plant,
                filt,
                disturbance,
                runs,
                base_seed,
                horizon=horizon,
                step=step,
                gamma=level,
                threads=ctx.threads,
                traces=traces,
                trace_limit=limit,
                xf0=model.sim.xf0,
            )
        with _timed(report.timings, "write_traces"):
            written = _write_traces(traces, ctx.out_dir)
        pooled = [f for f in summary.delta_frequency if math.isfinite(f)]
        report.monte_carlo = MonteCarloReport(
            runs=runs,
            diverged=sum(summary.diverged),
            max_gain=finite_or_none(summary.max_gain),
            mean_gain=finite_or_none(summary.mean_gain),
            gains=[finite_or_none(g) for g in summary.gains],
            delta_frequency=float(np.mean(pooled)) if pooled else None,
            gamma=level,
            within_gamma=summary.within_gamma,
            traces=written,
        )
        report.artifacts.extend(written)
        if any(summary.diverged):
            statuses.append(ReportStatus.UNSTABLE)
        elif summary.within_gamma is False:
            statuses.append(ReportStatus.GAIN_EXCEEDED)
        report.messages.append(f"max empirical gain {summary.max_gain:.4g} over {runs} runs")

    x0, xf0 = _probe_start(plant, model, order)
    with _timed(report.timings, "stability_probe"):
        probe = stability_probe(plant, filt, x0, horizon, xf0=xf0, step=step, seed=base_seed)
    report.stability = StabilitySummary(
        converged=probe.converged,
        ratio=finite_or_none(probe.ratio),
        final_norm=finite_or_none(probe.final_norm),
        horizon=horizon,
    )
    if not probe.converged:
        statuses.append(ReportStatus.UNSTABLE)
        report.messages.append(f"stability probe: |zeta(T)|/|zeta(0)| = {probe.ratio:.3e}")
    return report.finalize(worst_status(*statuses))


def _example1(ctx: RunContext) -> RunReport:
    model = load_model("example1")
    d = model.delays
    rho = model.plant.membership.rho[0]
    report = _base_report("example", ctx, model, example="example1", delays=list(EXAMPLE1_DELAYS))
    solver = LmiSolver(ctx.solve_options(model.solve, log_iterations=False))
    statuses = []
    for d_M, prior in zip(EXAMPLE1_DELAYS, EXAMPLE1_PRIOR, strict=True):
        plant = build_example1(d_M=d_M, mu=(d.sigma1, d.sigma2), rho=rho, delta0=d.delta0)
        with _timed(report.timings, f"d_M={d_M:g}"):
            try:
                search = min_gamma(
                    lambda g, p=plant: assemble_synthesis(p, g),
                    model.solve.gamma_bracket or DEFAULT_GAMMA_BRACKET,
                    solver=solver,
                )
            except BracketFailureError as e:
                report.messages.append(f"d_M={d_M:g}: {e}")
                report.table.append({"d_M": d_M, "gamma_star": None, "prior": prior, "within_prior": False})
                statuses.append(ReportStatus.INFEASIBLE)
                continue
        within = search.gamma <= prior * PRIOR_TOLERANCE
        report.table.append(
            {
                "d_M": d_M,
                "gamma_star": search.gamma,
                "prior": prior,
                "within_prior": within,
                "monotone": search.monotone,
            },
        )
        logger.info(f"example1 d_M={d_M:g}: gamma*={search.gamma:.4g} (prior {prior})")
        if not within:
            report.messages.append(f"d_M={d_M:g}: gamma*={search.gamma:.4g} above {PRIOR_TOLERANCE:g} x prior {prior}")
            statuses.append(ReportStatus.GAIN_EXCEEDED)
        if not search.monotone:
            report.messages.append(f"d_M={d_M:g}: feasibility is not monotone in gamma")
            statuses.append(ReportStatus.NUMERICAL_FAILURE)
    return report.finalize(worst_status(*statuses))


def _dc_motor(ctx: RunContext) -> RunReport:
    params = DcMotorParameters()
    synth, filt = run_synthesis("dc-motor", ctx)
    report = synth.model_copy(update={"command": "example"})
    report.config["example"] = "dc-motor"
    report.table = [{"parameter": k, "value": v} for k, v in params.as_table().items()]
    if filt is None:
        return report.finalize()
    sim = simulate_batch("dc-motor", None, ctx, filt=filt)
    report.monte_carlo = sim.monte_carlo
    report.stability = sim.stability
    report.timings.update(sim.timings)
    report.messages.extend(sim.messages)
    report.artifacts.extend(sim.artifacts)
    return report.finalize(worst_status(synth.status, sim.status))


def run_example(name: str, ctx: RunContext) -> RunReport:
    """Full pipeline on a bundled example.

    Raises:
        UnknownExampleError: for names other than ``example1`` and ``dc-motor``.

    """
    match name:
        case "example1":
            return _example1(ctx)
        case "dc-motor":
            return _dc_motor(ctx)
        case _:
            msg = f"unknown example {name!r}; choose one of {', '.join(EXAMPLES)}"
            raise UnknownExampleError(msg)
