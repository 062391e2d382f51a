"""Command-line front end for filter synthesis, verification and simulation."""

import sys
from collections.abc import Callable
from pathlib import Path
from typing import Annotated

import click
import typer
from loguru import logger
from rich import box
from rich.align import Align
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table
from rich.theme import Theme

from src.core.config import PROJECT_INFO, settings
from src.schemas.report import ExitCode, ReportStatus, RunReport
from src.services.pipeline_service import (
    ModelDataError,
    RunContext,
    UsageError,
    run_example,
    simulate_batch,
    status_for,
    synthesize,
    validate_model,
    verify,
)


custom_theme = Theme(
    {
        "info": "dim cyan",
        "warning": "magenta",
        "danger": "bold red",
        "success": "bold green",
    },
)
console = Console(theme=custom_theme)

app = typer.Typer(
    help="Robust H∞ filter synthesis for delayed singular T-S fuzzy systems",
    rich_markup_mode="rich",
    no_args_is_help=True,
)

ModelArg = Annotated[str, typer.Argument(help="Model file, or a bundled name such as [bold]dc-motor[/]")]
FilterArg = Annotated[Path, typer.Argument(help="Filter file written by [bold]synth[/]")]


def configure_logging(*, quiet: bool) -> None:
    """Route loguru to stderr at the configured level."""
    logger.remove()
    logger.add(
        sys.stderr,
        level="WARNING" if quiet else settings.log_level,
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )


def _version(value: bool) -> None:
    if value:
        console.print(f"{PROJECT_INFO['name']} {PROJECT_INFO['version']}")
        raise typer.Exit


@app.callback()
def main_callback(
    ctx: typer.Context,
    out: Annotated[Path, typer.Option("--out", help="Directory for reports, filters and traces")] = Path("fhs-out"),
    seed: Annotated[int | None, typer.Option("--seed", help="Base seed for every random draw")] = None,
    tol: Annotated[float | None, typer.Option("--tol", help="Feasibility margin tolerance")] = None,
    threads: Annotated[int | None, typer.Option("--threads", min=1, help="Worker cap (default FHS_THREADS)")] = None,
    traces: Annotated[int | None, typer.Option("--traces", min=0, help="Write at most this many trace CSVs")] = None,
    iteration_log: Annotated[bool, typer.Option("--iteration-log", help="Write solver_iterations.csv")] = False,  # noqa: FBT002
    quiet: Annotated[bool, typer.Option("--quiet", "-q", help="Only warnings and errors on stderr")] = False,  # noqa: FBT002
    version: Annotated[  # noqa: ARG001
        bool,
        typer.Option("--version", callback=_version, is_eager=True, help="Show the version and exit"),
    ] = False,  # noqa: FBT002
) -> None:
    """Filter synthesis toolkit entry point."""
    configure_logging(quiet=quiet)
    ctx.obj = RunContext(
        out_dir=out,
        seed=seed,
        tol=tol,
        threads=threads,
        trace_limit=traces,
        iteration_log=iteration_log,
        argv=sys.argv[1:],
    )


def _state(ctx: typer.Context) -> RunContext:
    if isinstance(ctx.obj, RunContext):
        return ctx.obj
    return RunContext(argv=sys.argv[1:])


def _print_failure(e: Exception) -> None:
    if isinstance(e, ModelDataError):
        console.print(f"\n[danger]Validation Failed:[/danger] {escape(str(e))}")
        for line in e.errors:
            field, _, msg = line.partition(": ")
            console.print(f"  ❌ [bold]{escape(field)}[/]: {escape(msg)}")
        return
    console.print(Panel(escape(str(e)), title=type(e).__name__, style="danger"))


def _render(report: RunReport) -> None:
    style = "success" if report.status is ReportStatus.OK else "danger"
    lines = [f"[bold]status[/]: {report.status.value} (exit {report.exit_code})"]
    if report.gamma is not None:
        lines.append(f"[bold]gamma[/]: {report.gamma:.6g}")
    if report.solver is not None:
        margin = "n/a" if report.solver.margin is None else f"{report.solver.margin:.3e}"
        lines.append(
            f"[bold]solver[/]: {report.solver.status}, margin {margin}, "
            f"{report.solver.iterations} steps, n_dec {report.solver.n_dec}",
        )
    if report.monte_carlo is not None:
        mc = report.monte_carlo
        gain = "diverged" if mc.max_gain is None else f"{mc.max_gain:.4g}"
        lines.append(f"[bold]monte carlo[/]: {mc.runs} runs, max gain {gain}, {mc.diverged} diverged")
    if report.stability is not None:
        ratio = "n/a" if report.stability.ratio is None else f"{report.stability.ratio:.3e}"
        lines.append(f"[bold]stability probe[/]: converged={report.stability.converged}, ratio {ratio}")
    lines.extend(f"[info]{escape(m)}[/info]" for m in report.messages)
    console.print(Panel("\n".join(lines), title=f"fhs {report.command}", box=box.ROUNDED, style=style))

    if report.admissibility:
        table = Table("rule", "regular", "impulse-free", "deg det(sE-A)", "rank E", title="Admissibility")
        for row in report.admissibility:
            table.add_row(str(row.rule), str(row.regular), str(row.impulse_free), str(row.degree), str(row.rank_e))
        console.print(table)
    if report.table:
        table = Table(*report.table[0].keys(), title="Comparison")
        for row in report.table:
            table.add_row(*("-" if v is None else f"{v:.4g}" if isinstance(v, float) else str(v) for v in row.values()))
        console.print(table)


def _execute(ctx: typer.Context, command: str, action: Callable[[RunContext], RunReport]) -> None:
    state = _state(ctx)
    try:
        report = action(state)
    except Exception as e:  # noqa: BLE001
        _print_failure(e)
        logger.debug(f"{command} failed: {e!r}")
        report = RunReport(command=command, argv=state.argv, config={"run": state.describe()}).finalize(
            status_for(e),
            str(e),
        )
    path = report.write(state.out_dir / f"{command}_report.json")
    _render(report)
    console.print(f"[info]report written to {escape(str(path))}[/info]")
    if report.exit_code != ExitCode.OK:
        raise typer.Exit(report.exit_code)


def _parse_gamma(value: str | None) -> float | str | None:
    if value is None or value == "min":
        return value
    try:
        return float(value)
    except ValueError as e:
        msg = f"--gamma must be a number or 'min', got {value!r}"
        raise UsageError(msg) from e


def parse_eps_spec(spec: str | None) -> list[float] | None:
    """Exponent list from ``"-2,-1,0"`` or an inclusive integer range ``"-2:2"``."""
    if spec is None:
        return None
    try:
        if ":" in spec:
            lo, hi = (int(part) for part in spec.split(":", 1))
            return [float(a) for a in range(lo, hi + 1)]
        return [float(part) for part in spec.split(",") if part.strip()]
    except ValueError as e:
        msg = f"--eps must look like '-2,-1,0,1,2' or '-2:2', got {spec!r}"
        raise UsageError(msg) from e


@app.command()
def validate(ctx: typer.Context, model: ModelArg) -> None:
    """Schema check, dimension audit and per-rule admissibility."""
    _execute(ctx, "validate", lambda state: validate_model(model, state))


@app.command()
def synth(
    ctx: typer.Context,
    model: ModelArg,
    design: Annotated[str | None, typer.Option(help="nominal, or robust with the ε grid")] = None,
    gamma: Annotated[str | None, typer.Option(help="Performance level, or 'min' to minimize")] = None,
    eps: Annotated[str | None, typer.Option(help="ε exponent grid, e.g. '-2:2' or '-1,0,1'")] = None,
    vertices: Annotated[bool, typer.Option(help="One LMI family per extreme sensor gain")] = False,  # noqa: FBT002
) -> None:
    """Synthesize a filter and write filter.json."""
    _execute(
        ctx,
        "synth",
        lambda state: synthesize(
            model,
            state,
            design=design,
            gamma=_parse_gamma(gamma),
            eps_exponents=parse_eps_spec(eps),
            vertices=vertices,
        ),
    )


@app.command(name="verify")
def verify_command(
    ctx: typer.Context,
    model: ModelArg,
    filter_file: FilterArg,
    gamma: Annotated[float | None, typer.Option(help="Level to certify (default: the filter's own)")] = None,
    vertices: Annotated[bool, typer.Option(help="One LMI family per extreme sensor gain")] = False,  # noqa: FBT002
) -> None:
    """Certify a given filter with the analysis LMIs."""
    _execute(ctx, "verify", lambda state: verify(model, filter_file, state, gamma=gamma, vertices=vertices))


@app.command()
def simulate(
    ctx: typer.Context,
    model: ModelArg,
    filter_file: Annotated[Path | None, typer.Argument(help="Filter file; omit for the zero filter")] = None,
    runs: Annotated[int | None, typer.Option(min=1, help="Monte Carlo runs")] = None,
    seed: Annotated[int | None, typer.Option(help="Base seed of this batch")] = None,
    gamma: Annotated[float | None, typer.Option(help="Declared level the gains are checked against")] = None,
) -> None:
    """Monte Carlo gains, trace CSVs and the stability probe."""
    _execute(
        ctx,
        "simulate",
        lambda state: simulate_batch(model, filter_file, state, runs=runs, seed=seed, gamma=gamma),
    )


@app.command()
def example(
    ctx: typer.Context,
    name: Annotated[str, typer.Argument(help="[bold]example1[/] or [bold]dc-motor[/]")],
) -> None:
    """Run a bundled example end to end."""
    console.print(
        Panel(
            Align.center(f"[bold white]Bundled example: {escape(name)}[/bold white]"),
            box=box.ROUNDED,
            style="bold blue",
        ),
    )
    _execute(ctx, "example", lambda state: run_example(name, state))


# typer may ship its own copy of click; its usage errors are caught as well
USAGE_ERRORS: tuple[type[Exception], ...] = (
    click.UsageError,
    *(cls for cls in typer.BadParameter.__mro__ if cls.__name__ == "UsageError"),
)
ABORTS: tuple[type[BaseException], ...] = (click.Abort, typer.Abort)


def main() -> None:
    """Console entry point; click usage errors exit with 64."""
    try:
        code = app(standalone_mode=False)
    except USAGE_ERRORS as e:
        e.show()  # type: ignore[attr-defined]
        sys.exit(ExitCode.USAGE)
    except ABORTS:
        sys.exit(1)
    sys.exit(code if isinstance(code, int) else 0)


if __name__ == "__main__":
    main()
