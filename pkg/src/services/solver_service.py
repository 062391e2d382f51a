"""Solver service: barrier/Newton feasibility and objective solves for LMI problems."""

import math
import uuid
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from loguru import logger
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.core.config import settings
from src.models.lmi import LmiProblem, Sense


Vector = NDArray[np.float64]
EQUALITY_TOL = 1e-8


class SolverError(Exception):
    """Solver service error."""


class BracketFailureError(SolverError):
    """No feasible γ was found inside the bracket cap."""


class SolveStatus(StrEnum):
    """Outcome of a solve, decided by the post-hoc eigenvalue check."""

    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible-to-margin"
    NUMERICAL_FAILURE = "numerical-failure"
    UNBOUNDED = "unbounded"


class SolveOptions(BaseModel):
    """Tolerances and caps of one solve; defaults come from the settings."""

    model_config = ConfigDict(frozen=True)

    margin_tol: float = Field(default_factory=lambda: settings.margin_tol, gt=0)
    step_tol: float = Field(default_factory=lambda: settings.step_tol, gt=0)
    max_iterations: int = Field(default_factory=lambda: settings.max_iterations, ge=1)
    target_margin: float = Field(default_factory=lambda: settings.target_margin, gt=0)
    radius: float = Field(default_factory=lambda: settings.feasibility_radius, gt=0)
    kappa0: float = Field(default=1.0, gt=0)
    kappa_growth: float = Field(default=10.0, gt=1)
    verbose: bool = False
    iteration_log: Path | None = None


@dataclass
class SolveResult:
    """Solution point with its independently verified margins."""

    status: SolveStatus
    x: Vector
    margin: float
    margins: dict[str, float]
    iterations: int
    objective: float | None = None
    equality_residual: float = 0.0

    @property
    def feasible(self) -> bool:
        """Whether the post-hoc check accepted the point."""
        return self.status is SolveStatus.FEASIBLE

    def worst(self, count: int = 5) -> list[tuple[str, float]]:
        """Constraints with the smallest margins."""
        return sorted(self.margins.items(), key=lambda kv: kv[1])[:count]


@dataclass(frozen=True, eq=False)
class _Block:
    """Sign-normalized inequality ``G0 + Σ x[idx_k] G_k ≻ 0``."""

    name: str
    g0: NDArray[np.float64]
    idx: NDArray[np.int64]
    coefs: NDArray[np.float64]

    @property
    def dim(self) -> int:
        return self.g0.shape[0]

    def value(self, x: Vector) -> NDArray[np.float64]:
        if self.idx.size == 0:
            return self.g0
        return self.g0 + np.tensordot(x[self.idx], self.coefs, axes=1)


def _blocks(problem: LmiProblem) -> list[_Block]:
    out = []
    for c in problem.constraints:
        if c.sense is Sense.EQ:
            continue
        sign = -1.0 if c.sense is Sense.NEG else 1.0
        coeffs = c.coefficients()
        idx = np.array(sorted(coeffs), dtype=np.int64)
        stack = np.array([sign * coeffs[k] for k in idx]) if idx.size else np.zeros((0, c.dim, c.dim))
        out.append(_Block(c.name, sign * c.F0, idx, stack))
    return out


class _IterationLog:
    """CSV sink for per-step solver progress."""

    def __init__(self, path: Path | None, *, append: bool = False) -> None:
        self._token = uuid.uuid4().hex
        self._sink: int | None = None
        self._log = logger.bind(solver_log=self._token)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not append or not path.exists():
                path.write_text("phase,step,margin,objective,decrement,kappa\n", encoding="utf-8")
            token = self._token
            self._sink = logger.add(
                path,
                format="{message}",
                level="TRACE",
                filter=lambda record: record["extra"].get("solver_log") == token,
            )

    def write(self, phase: str, step: int, margin: float, objective: float, decrement: float, kappa: float) -> None:
        if self._sink is not None:
            self._log.trace(f"{phase},{step},{margin:.12g},{objective:.12g},{decrement:.6g},{kappa:.6g}")

    def close(self) -> None:
        if self._sink is not None:
            logger.remove(self._sink)
            self._sink = None


class _Barrier:
    """Log-det barrier over the stacked inequalities plus a norm ball on x.

    With ``with_t`` the last coordinate of z is the common margin t and every
    block is shifted by ``-t I``; otherwise blocks are shifted by a fixed ``shift``.
    """

    def __init__(self, blocks: list[_Block], n_dec: int, radius: float, *, with_t: bool, shift: float = 0.0) -> None:
        self.blocks = blocks
        self.n_dec = n_dec
        self.radius_sq = radius**2
        self.with_t = with_t
        self.shift = shift
        self.size = n_dec + (1 if with_t else 0)
        self.degree = sum(b.dim for b in blocks) + 1

    def _split(self, z: Vector) -> tuple[Vector, float]:
        if self.with_t:
            return z[: self.n_dec], float(z[-1])
        return z, self.shift

    def value(self, z: Vector) -> float:
        """Barrier value, ``inf`` outside the domain."""
        x, t = self._split(z)
        ball = self.radius_sq - float(x @ x)
        if ball <= 0.0:
            return math.inf
        total = -math.log(ball)
        for b in self.blocks:
            s = b.value(x) - t * np.eye(b.dim)
            try:
                chol = sla.cholesky(s, lower=True)
            except sla.LinAlgError:
                return math.inf
            total -= 2.0 * float(np.sum(np.log(np.diag(chol))))
        return total

    def derivatives(self, z: Vector) -> tuple[Vector, NDArray[np.float64]]:
        """Gradient and Hessian at a domain point."""
        x, t = self._split(z)
        grad = np.zeros(self.size)
        hess = np.zeros((self.size, self.size))
        for b in self.blocks:
            s = b.value(x) - t * np.eye(b.dim)
            chol = sla.cholesky(s, lower=True)
            l_inv = sla.solve_triangular(chol, np.eye(b.dim), lower=True)
            scaled = l_inv @ b.coefs @ l_inv.T
            local = list(b.idx)
            if self.with_t:
                scaled = np.concatenate([scaled, -(l_inv @ l_inv.T)[None]], axis=0)
                local.append(self.n_dec)
            if not local:
                continue
            pos = np.asarray(local, dtype=np.int64)
            flat = scaled.reshape(len(local), -1)
            grad[pos] -= np.trace(scaled, axis1=1, axis2=2)
            hess[np.ix_(pos, pos)] += flat @ flat.T
        ball = self.radius_sq - float(x @ x)
        grad[: self.n_dec] += 2.0 * x / ball
        hess[: self.n_dec, : self.n_dec] += 2.0 * np.eye(self.n_dec) / ball + 4.0 * np.outer(x, x) / ball**2
        return grad, hess

    def margin(self, z: Vector) -> float:
        """Smallest sign-normalized eigenvalue over all blocks."""
        x, _ = self._split(z)
        return min((float(np.linalg.eigvalsh(b.value(x))[0]) for b in self.blocks), default=math.inf)


def _newton_direction(grad: Vector, hess: NDArray[np.float64]) -> Vector:
    try:
        factor = sla.cho_factor(hess, lower=True)
        return -sla.cho_solve(factor, grad)
    except (sla.LinAlgError, ValueError):
        return -np.linalg.lstsq(hess, grad, rcond=None)[0]


def _center(
    barrier: _Barrier,
    linear: Vector,
    kappa: float,
    z: Vector,
    opts: SolveOptions,
    budget: int,
    *,
    stop: Callable[[Vector], bool] | None = None,
    on_step: Callable[[Vector, float], None] | None = None,
) -> tuple[Vector, int, bool]:
    """Damped Newton on ``kappa·linearᵀz + barrier(z)``.

    Returns the new point, the steps spent and whether the line search stalled.
    """

    def phi(point: Vector) -> float:
        return kappa * float(linear @ point) + barrier.value(point)

    steps = 0
    current = phi(z)
    while steps < budget:
        grad, hess = barrier.derivatives(z)
        grad = grad + kappa * linear
        direction = _newton_direction(grad, hess)
        decrement = float(-grad @ direction)
        steps += 1
        if on_step is not None:
            on_step(z, decrement)
        if decrement / 2.0 <= opts.step_tol:
            return z, steps, False
        alpha = 1.0
        while alpha > 1e-12:
            trial = z + alpha * direction
            value = phi(trial)
            if value <= current - 0.25 * alpha * decrement:
                break
            alpha *= 0.5
        else:
            return z, steps, True
        z, current = trial, value
        if stop is not None and stop(z):
            return z, steps, False
    return z, steps, False


def _verify(
    problem: LmiProblem,
    x: Vector,
    opts: SolveOptions,
    iterations: int,
    *,
    objective: float | None = None,
    solver_failed: bool = False,
) -> SolveResult:
    """Decide the status from independent eigenvalue margins at ``x``."""
    margins: dict[str, float] = {}
    eq_residual = 0.0
    for c in problem.constraints:
        m = c.margin(x)
        margins[c.name] = m
        if c.sense is Sense.EQ:
            scale = max(1.0, float(np.max(np.abs(c.F0), initial=0.0)))
            eq_residual = max(eq_residual, -m / scale)
    inequality = [m for c, m in zip(problem.constraints, margins.values(), strict=True) if c.sense is not Sense.EQ]
    margin = min(inequality, default=math.inf)
    if not np.all(np.isfinite(x)):
        status = SolveStatus.NUMERICAL_FAILURE
    elif margin >= opts.margin_tol and eq_residual <= EQUALITY_TOL:
        status = SolveStatus.FEASIBLE
    elif solver_failed:
        status = SolveStatus.NUMERICAL_FAILURE
    else:
        status = SolveStatus.INFEASIBLE
    return SolveResult(
        status=status,
        x=x,
        margin=margin,
        margins=margins,
        iterations=iterations,
        objective=objective,
        equality_residual=eq_residual,
    )


class LmiSolver:
    """Max-margin feasibility and linear-objective minimization over frozen problems."""

    def __init__(self, options: SolveOptions | None = None) -> None:
        """Bind default options; each call may override them."""
        self.options = options or SolveOptions()

    def solve_feasibility(self, problem: LmiProblem, opts: SolveOptions | None = None) -> SolveResult:
        """Maximize the common margin t with ``G_c(x) ⪰ t I`` for every constraint.

        Stops as soon as t reaches ``target_margin``; the returned status comes
        from the post-hoc eigenvalue check only.
        """
        opts = opts or self.options
        if not problem.frozen:
            msg = f"problem {problem.name!r} must be frozen before solving"
            raise SolverError(msg)
        blocks = _blocks(problem)
        n_dec = problem.registry.size
        x0 = np.zeros(n_dec)
        if not blocks:
            return _verify(problem, x0, opts, 0)

        barrier = _Barrier(blocks, n_dec, opts.radius, with_t=True)
        t0 = barrier.margin(np.append(x0, 0.0)) - 1.0
        z = np.append(x0, t0)
        linear = np.zeros(barrier.size)
        linear[-1] = -1.0
        iteration_log = _IterationLog(opts.iteration_log)
        spent = 0
        logged = 0
        kappa = opts.kappa0
        stalled = False
        best_t = t0

        def reached(point: Vector) -> bool:
            return float(point[-1]) >= opts.target_margin

        def record(point: Vector, decrement: float) -> None:
            nonlocal logged
            logged += 1
            iteration_log.write("margin", logged, float(point[-1]), 0.0, decrement, kappa)

        try:
            while spent < opts.max_iterations:
                z, steps, stalled = _center(
                    barrier,
                    linear,
                    kappa,
                    z,
                    opts,
                    opts.max_iterations - spent,
                    stop=reached,
                    on_step=record,
                )
                spent += steps
                if opts.verbose:
                    logger.debug(f"{problem.name}: kappa={kappa:.3g} t={z[-1]:.6g} steps={spent}")
                if reached(z) or stalled:
                    break
                if barrier.degree / kappa < opts.step_tol * max(1.0, abs(float(z[-1]))):
                    break
                if abs(float(z[-1]) - best_t) <= opts.step_tol * max(1.0, abs(best_t)) and z[-1] < 0 and kappa > 1e6:
                    break
                best_t = float(z[-1])
                kappa *= opts.kappa_growth
        finally:
            iteration_log.close()

        result = _verify(problem, z[:n_dec], opts, spent, solver_failed=stalled and not reached(z))
        logger.info(f"{problem.name}: {result.status.value}, margin={result.margin:.3e}, steps={spent}")
        return result

    def minimize_objective(self, problem: LmiProblem, opts: SolveOptions | None = None) -> SolveResult:
        """Minimize ``cᵀx`` over the strict-feasible set with margin ``margin_tol``.

        An iterate that runs to the edge of the norm ball while staying
        feasible is reported with status ``UNBOUNDED``.
        """
        opts = opts or self.options
        start = self.solve_feasibility(problem, opts)
        c = problem.objective
        if c is None or not np.any(c):
            start.objective = problem.objective_value(start.x)
            return start
        if not start.feasible:
            return start

        blocks = _blocks(problem)
        barrier = _Barrier(blocks, problem.registry.size, opts.radius, with_t=False, shift=opts.margin_tol)
        iteration_log = _IterationLog(opts.iteration_log, append=True)
        z = start.x.copy()
        spent = 0
        logged = start.iterations
        kappa = opts.kappa0
        stalled = False
        unbounded = False

        def record(point: Vector, decrement: float) -> None:
            nonlocal logged
            logged += 1
            iteration_log.write("objective", logged, 0.0, float(c @ point), decrement, kappa)

        try:
            while spent < opts.max_iterations:
                z, steps, stalled = _center(barrier, c, kappa, z, opts, opts.max_iterations - spent, on_step=record)
                spent += steps
                if float(z @ z) >= (0.99 * opts.radius) ** 2:
                    unbounded = True
                    break
                if stalled or barrier.degree / kappa < opts.step_tol * max(1.0, abs(float(c @ z))):
                    break
                kappa *= opts.kappa_growth
        finally:
            iteration_log.close()

        result = _verify(
            problem,
            z,
            opts,
            start.iterations + spent,
            objective=problem.objective_value(z),
            solver_failed=stalled,
        )
        if unbounded and result.feasible:
            logger.warning(f"{problem.name}: objective unbounded below (|x| reached the feasibility radius)")
            result.status = SolveStatus.UNBOUNDED
            return result
        if not result.feasible and start.feasible:
            logger.warning(f"{problem.name}: objective phase lost feasibility; keeping the phase-one point")
            start.objective = problem.objective_value(start.x)
            return start
        logger.info(f"{problem.name}: objective={result.objective:.6g}, margin={result.margin:.3e}")
        return result

    def solve(self, problem: LmiProblem, opts: SolveOptions | None = None) -> SolveResult:
        """Objective solve when the problem has one, feasibility otherwise."""
        if problem.objective is not None:
            return self.minimize_objective(problem, opts)
        return self.solve_feasibility(problem, opts)


@dataclass
class GammaSearchResult:
    """Smallest feasible γ found by bisection."""

    gamma: float
    result: SolveResult
    problem: LmiProblem
    probes: int
    monotone: bool = True


def min_gamma(
    assembler: Callable[[float], LmiProblem],
    bracket: tuple[float, float],
    rel_tol: float = 1e-3,
    *,
    solver: LmiSolver | None = None,
    opts: SolveOptions | None = None,
    max_expansions: int = 10,
) -> GammaSearchResult:
    """Bisection on γ with feasibility as the oracle.

    Raises:
        BracketFailureError: when no γ up to ``hi · 2^max_expansions`` is feasible.

    """
    solver = solver or LmiSolver()
    lo, hi = bracket
    if lo < 0 or hi <= lo:
        msg = f"invalid bracket {bracket}"
        raise BracketFailureError(msg)
    probes = 0

    def probe(gamma: float) -> tuple[SolveResult, LmiProblem]:
        nonlocal probes
        probes += 1
        problem = assembler(gamma)
        return solver.solve_feasibility(problem, opts), problem

    best, best_problem = probe(hi)
    expansions = 0
    while not best.feasible:
        if expansions >= max_expansions:
            msg = f"no feasible gamma up to {hi:.6g}"
            raise BracketFailureError(msg)
        lo, hi = hi, 2.0 * hi
        expansions += 1
        best, best_problem = probe(hi)
    if lo > 0:
        at_lo, lo_problem = probe(lo)
        if at_lo.feasible:
            logger.warning(f"gamma bracket lower end {lo:.6g} is already feasible")
            return GammaSearchResult(lo, at_lo, lo_problem, probes)

    while (hi - lo) / hi > rel_tol:
        mid = 0.5 * (lo + hi)
        res, problem = probe(mid)
        if res.feasible:
            hi, best, best_problem = mid, res, problem
        else:
            lo = mid
        logger.debug(f"gamma bisection: [{lo:.6g}, {hi:.6g}]")

    check, _ = probe(1.1 * hi)
    if not check.feasible:
        logger.warning(f"feasibility is not monotone in gamma: feasible at {hi:.6g}, not at {1.1 * hi:.6g}")
    return GammaSearchResult(hi, best, best_problem, probes, monotone=check.feasible)


@dataclass
class EpsPoint:
    """One solved multiplier pair."""

    eps1: float
    eps2: float
    result: SolveResult
    problem: LmiProblem

    def rank_key(self) -> tuple[int, float, float, float]:
        """Feasible first, then lowest objective or highest margin, then smaller ε."""
        score = self.result.objective if self.result.objective is not None else -self.result.margin
        return (0 if self.result.feasible else 1, score, self.eps1, self.eps2)


@dataclass
class EpsSearchResult:
    """Best pair of a multiplier grid search."""

    best: EpsPoint
    points: list[EpsPoint] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        """Whether any pair was feasible."""
        return self.best.result.feasible


def log_grid(exponents: Iterable[float] | None = None) -> list[tuple[float, float]]:
    """All pairs ``(10^a, 10^b)`` over the exponent list."""
    exps = list(settings.eps_grid_exponents if exponents is None else exponents)
    return [(10.0**a, 10.0**b) for a in exps for b in exps]


def eps_grid_search(
    assembler: Callable[[float, float], LmiProblem],
    grid: Sequence[tuple[float, float]] | None = None,
    *,
    solver: LmiSolver | None = None,
    opts: SolveOptions | None = None,
    threads: int | None = None,
) -> EpsSearchResult:
    """Solve every (ε1, ε2) pair and keep the best.

    Problems with an objective are minimized and ranked by objective; the
    rest are ranked by margin. All-infeasible grids report the best margin.
    """
    pairs = list(grid if grid is not None else log_grid())
    if not pairs:
        msg = "eps grid is empty"
        raise SolverError(msg)
    if any(e1 <= 0 or e2 <= 0 for e1, e2 in pairs):
        msg = "eps grid entries must be positive"
        raise SolverError(msg)
    solver = solver or LmiSolver()

    def run(pair: tuple[float, float]) -> EpsPoint:
        problem = assembler(*pair)
        return EpsPoint(pair[0], pair[1], solver.solve(problem, opts), problem)

    workers = min(threads or settings.threads, len(pairs))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        points = list(pool.map(run, pairs))
    best = min(points, key=EpsPoint.rank_key)
    if not best.result.feasible:
        logger.warning(f"no feasible eps pair; best margin {best.result.margin:.3e} at ({best.eps1:g}, {best.eps2:g})")
    return EpsSearchResult(best, points)
