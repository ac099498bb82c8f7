"""Optimization drivers: One-shot, time-parallel reduced space, time-serial reduced space.

All three share the update ``rho <- rho - theta * g`` (constant preconditioner
``B = theta I``) and differ only in how ``g`` is produced:

* One-shot takes the inexact gradient of a single piggyback iteration,
* the parallel reduced-space method re-converges state and adjoint with MGRIT
  before every update (warm started),
* the serial reduced-space method runs a forward sweep and a backward adjoint
  sweep.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .adjoint_mgrit import Piggyback, serial_adjoint
from .errors import DivergenceDetected, InvalidConfig, InvalidInput, MaxItersExceeded, PintoptError
from .mgrit import CostCounter, serial_solve
from .model_problem import as_design

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    theta: float = 0.9
    grad_tol: float = 1e-7
    max_outer: int = 500
    inner_tol: float = 1e-9
    inner_max: int = 200
    alpha: float = 0.0
    rho0: float = 2.0
    warmup: int = 2
    divergence_factor: float = 1e3

    def __post_init__(self):
        if not self.theta > 0:
            raise InvalidConfig("theta must be positive")
        if not self.grad_tol > 0:
            raise InvalidConfig("grad_tol must be positive")
        if not self.inner_tol > 0:
            raise InvalidConfig("inner_tol must be positive")
        if self.max_outer < 1 or self.inner_max < 1:
            raise InvalidConfig("max_outer and inner_max must be >= 1")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be >= 0")
        if self.warmup < 0:
            raise InvalidConfig("warmup must be >= 0")
        if not self.divergence_factor > 1:
            raise InvalidConfig("divergence_factor must exceed 1")


TRACE_COLUMNS = (
    "iteration",
    "rho",
    "objective",
    "grad_norm",
    "state_norm",
    "adjoint_norm",
    "cycles",
    "steps",
    "adjoint_steps",
    "span",
    "adjoint_span",
    "wall_time",
)


@dataclass
class OptimizationTrace:
    """One row per outer iteration; counters and wall time are cumulative."""

    method: str
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({c: row[c] for c in TRACE_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]


@dataclass
class OptimizationResult:
    rho: np.ndarray
    trace: OptimizationTrace
    u: np.ndarray | None = None
    ubar: np.ndarray | None = None
    grad: np.ndarray | None = None


def design_update(rho, g, theta: float) -> np.ndarray:
    return as_design(rho) - theta * np.asarray(g, dtype=float)


def alpha_bound(eta: float, l: float) -> float:
    """Smallest penalty weight for which One-shot steps descend on the augmented Lagrangian."""
    if not 0 <= eta < 1:
        raise InvalidInput(f"contraction rate must satisfy 0 <= eta < 1, got {eta}")
    if l < 0:
        raise InvalidInput(f"time lag must be >= 0, got {l}")
    return 2.0 * l / (1.0 - eta)


def augmented_lagrangian(solver, model, u: np.ndarray, ubar: np.ndarray, rho, alpha: float) -> float:
    """``alpha/2 |H(u) - u|^2 + J(u) + ubar . (H(u) - u)``, costing one extra cycle."""
    if alpha < 0:
        raise InvalidInput("alpha must be >= 0")
    r = solver.cycle(u, rho) - u
    return float(0.5 * alpha * np.sum(r * r) + model.objective(u, rho) + np.sum(ubar * r))


class _Progress:
    """Cumulative counters of one run, relative to where the counter stood at the start."""

    def __init__(self, counter: CostCounter):
        self.counter = counter
        self.base = counter.snapshot()
        self.t0 = time.perf_counter()
        self.cycles = 0

    def row(self, k, rho, J, gnorm, snorm, anorm) -> dict:
        snap = self.counter.snapshot()
        d = {key: snap[key] - self.base[key] for key in snap}
        return dict(
            iteration=k,
            rho=float(rho[0]) if rho.size == 1 else float(np.linalg.norm(rho)),
            objective=float(J),
            grad_norm=float(gnorm),
            state_norm=float(snorm),
            adjoint_norm=float(anorm),
            cycles=self.cycles,
            wall_time=time.perf_counter() - self.t0,
            **d,
        )


class _Guard:
    def __init__(self, factor: float):
        self.factor = factor
        self.best = np.inf

    def check(self, gnorm: float, k: int):
        if not np.isfinite(gnorm):
            raise DivergenceDetected(f"non-finite gradient at outer iteration {k}")
        self.best = min(self.best, gnorm)
        if gnorm > self.factor * self.best:
            raise DivergenceDetected(
                f"gradient norm {gnorm:.3e} exceeds {self.factor:g} x its minimum {self.best:.3e} at iteration {k}"
            )


@contextmanager
def _keep_partial(make):
    """Attach the run so far to any library error escaping the block."""
    try:
        yield
    except PintoptError as exc:
        if exc.partial is None:
            exc.partial = make()
        raise


def oneshot_run(
    pg: Piggyback, cfg: OptimizerConfig, rho0=None, u0=None, ubar0=None
) -> OptimizationResult:
    """Design update after every piggyback iteration, using the inexact gradient.

    The gradient at iteration k is assembled from ``(u_k, ubar_k)``, i.e. the
    iterates entering that iteration.

    The first ``cfg.warmup`` piggyback iterations run at ``rho0`` without a
    design update and only serve to produce the starting pair ``(u_0, ubar_0)``:
    from a cold start, ``ubar_1 = grad_u J(u_0)`` carries no transport through
    time and the "gradient" built from it can point anywhere.  Their cycles are
    charged to the run but they are not outer iterations.

    Termination needs ``|g| <= grad_tol`` and, so that the returned triple is
    a genuine fixed point, state and adjoint increments that have dropped by
    ``inner_tol`` relative to the first piggyback iteration.  The inexact
    gradient alone can cross zero while the design is still in transit.
    """
    solver, model = pg.solver, pg.model
    rho = as_design(cfg.rho0 if rho0 is None else rho0)
    u = solver.initial_guess() if u0 is None else np.array(u0, dtype=float)
    ubar = pg.initial_adjoint() if ubar0 is None else np.array(ubar0, dtype=float)
    trace = OptimizationTrace("oneshot")
    prog = _Progress(solver.counter)
    guard = _Guard(cfg.divergence_factor)
    with _keep_partial(lambda: OptimizationResult(rho, trace, u, ubar)):
        ref = None
        for _ in range(cfg.warmup):
            u, ubar, _, norms = pg.iterate(u, ubar, rho)
            prog.cycles += 1
            ref = norms if ref is None else ref
        for k in range(cfg.max_outer):
            J = model.objective(u, rho)
            u_new, ubar_new, g, (sn, an) = pg.iterate(u, ubar, rho)
            prog.cycles += 1
            ref = (sn, an) if ref is None else ref
            gnorm = float(np.linalg.norm(g))
            trace.append(**prog.row(k, rho, J, gnorm, sn, an))
            logger.info("oneshot %d: rho=%.8f J=%.3e |g|=%.3e", k, rho[0], J, gnorm)
            settled = sn <= cfg.inner_tol * ref[0] and an <= cfg.inner_tol * ref[1]
            if gnorm <= cfg.grad_tol and settled:
                return OptimizationResult(rho, trace, u_new, ubar_new, g)
            if ubar.any():
                # with a zero adjoint g is only the regularization pull, not a baseline
                guard.check(gnorm, k)
            rho = design_update(rho, g, cfg.theta)
            u, ubar = u_new, ubar_new
    raise MaxItersExceeded(
        f"One-shot did not reach |g| <= {cfg.grad_tol:g} in {cfg.max_outer} iterations",
        partial=OptimizationResult(rho, trace, u, ubar),
    )


def reduced_space_parallel(pg: Piggyback, cfg: OptimizerConfig, rho0=None) -> OptimizationResult:
    """Piggyback solve to ``inner_tol`` before each design update, warm started.

    Every inner solve is normalized by the first increments of the initial cold
    start, so ``inner_tol`` means the same absolute accuracy at every outer step.
    """
    solver, model = pg.solver, pg.model
    rho = as_design(cfg.rho0 if rho0 is None else rho0)
    u, ubar = solver.initial_guess(), pg.initial_adjoint()
    trace = OptimizationTrace("reduced_parallel")
    prog = _Progress(solver.counter)
    guard = _Guard(cfg.divergence_factor)
    ref = None
    with _keep_partial(lambda: OptimizationResult(rho, trace, u, ubar)):
        for k in range(cfg.max_outer):
            try:
                u, ubar, g, rec = pg.solve(
                    rho, tol=cfg.inner_tol, max_iters=cfg.inner_max, u=u, ubar=ubar, reference=ref
                )
            except MaxItersExceeded as exc:
                # keep going from the partial iterate; the outer loop still makes progress
                u, ubar, g, rec = exc.partial
                logger.warning("inner solve hit its cap at outer iteration %d", k)
            prog.cycles += rec.cycles
            if ref is None:
                # warm-started solves are measured against the cold start's first increments
                ref = (rec.state_norms[0], rec.adjoint_norms[0])
            J = model.objective(u, rho)
            gnorm = float(np.linalg.norm(g))
            trace.append(**prog.row(k, rho, J, gnorm, rec.state_norms[-1], rec.adjoint_norms[-1]))
            logger.info("reduced-parallel %d: rho=%.8f |g|=%.3e inner=%d", k, rho[0], gnorm, rec.cycles)
            if gnorm <= cfg.grad_tol:
                return OptimizationResult(rho, trace, u, ubar, g)
            guard.check(gnorm, k)
            rho = design_update(rho, g, cfg.theta)
    raise MaxItersExceeded(
        f"reduced-space (parallel) did not reach |g| <= {cfg.grad_tol:g} in {cfg.max_outer} iterations",
        partial=OptimizationResult(rho, trace, u, ubar),
    )


def reduced_space_serial(
    model, N: int, dt: float, cfg: OptimizerConfig, rho0=None, cores: int = 256
) -> OptimizationResult:
    """Forward sweep, backward adjoint sweep, exact gradient, update."""
    rho = as_design(cfg.rho0 if rho0 is None else rho0)
    counter = CostCounter(1, N, cores)
    trace = OptimizationTrace("reduced_serial")
    prog = _Progress(counter)
    guard = _Guard(cfg.divergence_factor)
    u = lam = None
    with _keep_partial(lambda: OptimizationResult(rho, trace, u, lam)):
        for k in range(cfg.max_outer):
            u = serial_solve(model, N, dt, rho, counter)
            lam, g = serial_adjoint(model, u, rho, dt, counter)
            J = model.objective(u, rho)
            gnorm = float(np.linalg.norm(g))
            trace.append(**prog.row(k, rho, J, gnorm, 0.0, 0.0))
            logger.info("reduced-serial %d: rho=%.8f |g|=%.3e", k, rho[0], gnorm)
            if gnorm <= cfg.grad_tol:
                return OptimizationResult(rho, trace, u, lam, g)
            guard.check(gnorm, k)
            rho = design_update(rho, g, cfg.theta)
    raise MaxItersExceeded(
        f"reduced-space (serial) did not reach |g| <= {cfg.grad_tol:g} in {cfg.max_outer} iterations",
        partial=OptimizationResult(rho, trace, u, lam),
    )


def reduced_gradient(pg: Piggyback, rho, tol: float = 1e-11, max_iters: int = 400) -> np.ndarray:
    """Tight piggyback solve from a cold start; returns the converged reduced gradient."""
    _, _, g, _ = pg.solve(rho, tol=tol, max_iters=max_iters)
    return np.asarray(g, dtype=float)
