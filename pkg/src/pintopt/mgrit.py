"""FAS multigrid reduction in time for one-step time integrators.

A fine-level space-time state is an array ``u`` of shape ``(N + 1, M)`` whose
row 0 is the fixed initial condition.  ``Mgrit.cycle`` is one V- or F-cycle,
i.e. the fixed-point map ``u_{k+1} = H(u_k, rho)``.

Every primitive a cycle performs (a batched step, a sequential sweep, a linear
combination of rows) goes through a small executor that can record it on a
tape; :mod:`pintopt.adjoint_mgrit` replays such a tape in reverse to apply the
exact transpose of the cycle.

The stepper contract is duck-typed: ``dim``, ``initial_state()``,
``step(u, rho, dt)`` for one state or a batch ``(B, M)`` and, for adjoints,
``step_adjoint(u_prev, rho, ubar, dt) -> (ubar_prev, rho_bar_rows)``.
State algebra (clone, axpy, dot, norm) is plain numpy.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InsufficientData, InvalidConfig, MaxItersExceeded
from .workers import WorkerPool

logger = logging.getLogger(__name__)

CYCLE_TYPES = ("V", "F")
RELAXATIONS = ("F", "FC", "FCF")
COARSE_OPERATORS = ("rediscretize", "ideal")


@dataclass(frozen=True)
class TimeLevel:
    index: int
    n_steps: int
    dt: float
    # fine-grid index of this level's point j is j * stride
    stride: int

    @property
    def n_points(self) -> int:
        return self.n_steps + 1


@dataclass(frozen=True)
class TemporalHierarchy:
    levels: tuple[TimeLevel, ...]
    m: int
    max_levels: int

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> TimeLevel:
        return self.levels[i]

    def c_points(self, level: int) -> np.ndarray:
        """Indices on ``level`` that survive to ``level + 1`` (multiples of m)."""
        return np.arange(0, self.levels[level].n_steps + 1, self.m)

    def f_points(self, level: int) -> np.ndarray:
        idx = np.arange(self.levels[level].n_steps + 1)
        return idx[idx % self.m != 0]


def build_hierarchy(N: int, m: int, max_levels: int, dt: float = 1.0) -> TemporalHierarchy:
    """Nested time grids: each coarser level keeps every m-th point."""
    if m < 2:
        raise InvalidConfig(f"coarsening factor must be >= 2, got {m}")
    if N < 0 or max_levels < 1:
        raise InvalidConfig("need N >= 0 and max_levels >= 1")
    levels = [TimeLevel(0, N, dt, 1)]
    while levels[-1].n_points > m and len(levels) < max_levels:
        prev = levels[-1]
        levels.append(TimeLevel(prev.index + 1, prev.n_steps // m, prev.dt * m, prev.stride * m))
    return TemporalHierarchy(tuple(levels), m, max_levels)


@dataclass(frozen=True)
class MgritConfig:
    m: int = 4
    max_levels: int = 3
    cycle_type: str = "V"
    relaxation: str = "FCF"
    halting_tol: float = 1e-9
    max_iters: int = 100
    coarsest_solve: str = "sequential"
    # "ideal": coarse step = m^l composed fine steps (exact two-level reduction)
    coarse_operator: str = "rediscretize"

    def __post_init__(self):
        if self.m < 2:
            raise InvalidConfig(f"m must be >= 2, got {self.m}")
        if self.max_levels < 1:
            raise InvalidConfig("max_levels must be >= 1")
        if self.cycle_type not in CYCLE_TYPES:
            raise InvalidConfig(f"cycle_type must be one of {CYCLE_TYPES}")
        if self.relaxation not in RELAXATIONS:
            raise InvalidConfig(f"relaxation must be one of {RELAXATIONS}")
        if self.coarse_operator not in COARSE_OPERATORS:
            raise InvalidConfig(f"coarse_operator must be one of {COARSE_OPERATORS}")
        if self.coarsest_solve != "sequential":
            raise InvalidConfig("only sequential coarsest solves are supported")
        if self.halting_tol <= 0 or self.max_iters < 1:
            raise InvalidConfig("halting_tol must be positive and max_iters >= 1")


@dataclass
class ConvergenceRecord:
    state_norms: list = field(default_factory=list)
    adjoint_norms: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return len(self.state_norms)

    def append(self, state, adjoint=np.nan, gradient=np.nan, objective=np.nan, wall=np.nan):
        self.state_norms.append(float(state))
        self.adjoint_norms.append(float(adjoint))
        self.gradient_norms.append(float(gradient))
        self.objective.append(float(objective))
        self.wall_times.append(float(wall))

    def rows(self) -> list[dict]:
        return [
            {
                "iteration": k,
                "state_norm": self.state_norms[k],
                "adjoint_norm": self.adjoint_norms[k],
                "gradient_norm": self.gradient_norms[k],
                "objective": self.objective[k],
                "wall_time": self.wall_times[k],
            }
            for k in range(self.cycles)
        ]


class CostCounter:
    """Machine-independent cost of everything run through one solver.

    ``steps``/``adjoint_steps`` count step applications per level (coarse
    steps count once each, composed "ideal" steps count their fine steps).
    ``span`` is the critical path in steps when the fine time line is split
    into ``cores`` equal contiguous pieces, each owning the points of every
    level that fall in its piece; sequential sweeps contribute their length.
    """

    def __init__(self, n_levels: int, n_fine: int, cores: int):
        self.cores = cores
        self.n_fine = n_fine
        self.steps = np.zeros(n_levels, dtype=np.int64)
        self.adjoint_steps = np.zeros(n_levels, dtype=np.int64)
        self.span = 0
        self.adjoint_span = 0

    @property
    def total_steps(self) -> int:
        return int(self.steps.sum())

    @property
    def total_adjoint_steps(self) -> int:
        return int(self.adjoint_steps.sum())

    def batch_span(self, fine_index: np.ndarray) -> int:
        owner = (fine_index.astype(np.int64) * self.cores) // (self.n_fine + 1)
        return int(np.bincount(owner).max()) if owner.size else 0

    def add(self, level: int, fine_index: np.ndarray, weight: int, adjoint: bool, sequential: bool):
        n = int(fine_index.size)
        span = n if sequential else self.batch_span(fine_index)
        if adjoint:
            self.adjoint_steps[level] += n * weight
            self.adjoint_span += span * weight
        else:
            self.steps[level] += n * weight
            self.span += span * weight

    def snapshot(self) -> dict:
        return {
            "steps": self.total_steps,
            "adjoint_steps": self.total_adjoint_steps,
            "span": int(self.span),
            "adjoint_span": int(self.adjoint_span),
        }


# -- level propagators ---------------------------------------------------------


class Propagator:
    """The time-step operator of one level."""

    def __init__(self, stepper, dt: float, repeats: int = 1):
        self.stepper = stepper
        self.dt = dt
        self.repeats = repeats

    def forward(self, x: np.ndarray, rho) -> np.ndarray:
        for _ in range(self.repeats):
            x = self.stepper.step(x, rho, self.dt)
        return x

    def adjoint(self, x: np.ndarray, ybar: np.ndarray, rho):
        if self.repeats == 1:
            return self.stepper.step_adjoint(x, rho, ybar, self.dt)
        xs = [x]
        for _ in range(self.repeats - 1):
            xs.append(self.stepper.step(xs[-1], rho, self.dt))
        rho_bar = 0.0
        for xk in reversed(xs):
            ybar, rb = self.stepper.step_adjoint(xk, rho, ybar, self.dt)
            rho_bar = rho_bar + rb
        return ybar, rho_bar


# -- recorded primitive actions ------------------------------------------------


@dataclass
class StepAction:
    """``arrays[dst][di] = Phi_level(arrays[src][si]) (+ arrays[add][ai])``."""

    level: int
    dst: str
    di: np.ndarray
    src: str
    si: np.ndarray
    add: str | None
    ai: np.ndarray | None
    x: np.ndarray  # snapshot of the step inputs


@dataclass
class SweepAction:
    """Sequential ``arrays[name][j] = Phi(arrays[name][j-1]) (+ arrays[add][j])`` for j = 1..n."""

    level: int
    name: str
    add: str | None
    n: int
    x: np.ndarray  # inputs of all n steps, in order


@dataclass
class AllocAction:
    name: str
    shape: tuple


@dataclass
class CombineAction:
    """``arrays[dst][di] = sum(coef * arrays[name][idx])``."""

    dst: str
    di: np.ndarray
    terms: list


class _Executor:
    """Runs cycle primitives on a dict of named arrays, optionally taping them."""

    def __init__(self, solver: "Mgrit", arrays: dict, rho, tape=None, counting: bool = True):
        self.solver = solver
        self.arrays = arrays
        self.rho = rho
        self.tape = tape
        self.counting = counting

    def alloc(self, name, shape):
        self.arrays[name] = np.zeros(shape)
        if self.tape is not None:
            self.tape.record(AllocAction(name, shape))

    def step(self, level, dst, di, src, si, add=None, ai=None):
        if di.size == 0:
            return
        s = self.solver
        x = self.arrays[src][si]
        prop = s.propagators[level]
        y = s.pool.map_rows(lambda xc: prop.forward(xc, self.rho), x)
        if add is not None:
            y += self.arrays[add][ai]
        self.arrays[dst][di] = y
        if self.counting:
            s.counter.add(level, si * s.hierarchy[level].stride, prop.repeats, adjoint=False, sequential=False)
        if self.tape is not None:
            self.tape.record(StepAction(level, dst, di, src, si, add, ai, x))

    def sweep(self, level, name, add=None):
        s = self.solver
        u = self.arrays[name]
        g = self.arrays[add] if add is not None else None
        n = u.shape[0] - 1
        prop = s.propagators[level]
        for j in range(1, n + 1):
            y = prop.forward(u[j - 1], self.rho)
            u[j] = y + g[j] if g is not None else y
        if self.counting:
            s.counter.add(level, np.arange(n) * s.hierarchy[level].stride, prop.repeats, adjoint=False, sequential=True)
        if self.tape is not None:
            self.tape.record(SweepAction(level, name, add, n, u[:n].copy()))

    def combine(self, dst, di, terms):
        acc = None
        for coef, name, idx in terms:
            val = self.arrays[name][idx]
            val = val if coef == 1.0 else coef * val
            acc = val.copy() if acc is None else acc + val
        self.arrays[dst][di] = acc
        if self.tape is not None:
            self.tape.record(CombineAction(dst, di, list(terms)))


class Mgrit:
    """FAS-MGRIT solver for ``u^i = Phi(u^{i-1}, rho)``, ``i = 1..N``."""

    def __init__(self, stepper, N: int, dt: float, config: MgritConfig | None = None, workers: int = 1, cores: int = 256):
        self.stepper = stepper
        self.N = N
        self.dt = dt
        self.config = config if config is not None else MgritConfig()
        self.hierarchy = build_hierarchy(N, self.config.m, self.config.max_levels, dt)
        self.pool = WorkerPool(workers)
        self.counter = CostCounter(len(self.hierarchy), N, cores)
        self.u0 = np.asarray(stepper.initial_state(), dtype=float)
        if self.config.coarse_operator == "ideal":
            self.propagators = [Propagator(stepper, dt, lvl.stride) for lvl in self.hierarchy.levels]
        else:
            self.propagators = [Propagator(stepper, lvl.dt) for lvl in self.hierarchy.levels]

    @property
    def workers(self) -> int:
        return self.pool.workers

    def close(self):
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def initial_guess(self) -> np.ndarray:
        """Cold start: ``u^0`` broadcast to every time point."""
        return np.tile(self.u0, (self.N + 1, 1))

    # -- relaxation on one level -------------------------------------------------

    def _rhs_name(self, level):
        return f"g{level}" if level > 0 else None

    def _f_relax(self, ex: _Executor, level: int):
        lvl, m = self.hierarchy[level], self.hierarchy.m
        c = np.arange(0, lvl.n_steps + 1, m)
        name, g = f"u{level}", self._rhs_name(level)
        for k in range(1, m):
            di = c + k
            di = di[di <= lvl.n_steps]
            ex.step(level, name, di, name, di - 1, g, di if g else None)

    def _c_relax(self, ex: _Executor, level: int):
        lvl, m = self.hierarchy[level], self.hierarchy.m
        di = np.arange(m, lvl.n_steps + 1, m)
        name, g = f"u{level}", self._rhs_name(level)
        ex.step(level, name, di, name, di - 1, g, di if g else None)

    def _relax(self, ex: _Executor, level: int):
        for sweep in self.config.relaxation:
            if sweep == "F":
                self._f_relax(ex, level)
            else:
                self._c_relax(ex, level)

    def _restrict(self, ex: _Executor, level: int):
        """Inject the C-point states and build the FAS coarse right-hand side.

        With injection the injected-state terms of tau cancel exactly, so the
        coarse right-hand side is ``(fine step into c) - (coarse step into j)``.
        """
        m = self.hierarchy.m
        coarse = self.hierarchy[level + 1]
        n_c = coarse.n_steps
        fine, cname = f"u{level}", f"u{level + 1}"
        j = np.arange(1, n_c + 1)
        c = j * m
        for prefix in "ugts":
            ex.alloc(f"{prefix}{level + 1}", (n_c + 1, self.u0.size))
        g = self._rhs_name(level)
        # fine residual at C-points is t - u[c]
        ex.step(level, f"t{level + 1}", j, fine, c - 1, g, c if g else None)
        ex.combine(cname, np.arange(n_c + 1), [(1.0, fine, np.arange(n_c + 1) * m)])
        ex.step(level + 1, f"s{level + 1}", j, cname, j - 1)
        ex.combine(f"g{level + 1}", j, [(1.0, f"t{level + 1}", j), (-1.0, f"s{level + 1}", j)])

    def _correct(self, ex: _Executor, level: int):
        m = self.hierarchy.m
        n_c = self.hierarchy[level + 1].n_steps
        j = np.arange(1, n_c + 1)
        ex.combine(f"u{level}", j * m, [(1.0, f"u{level + 1}", j)])

    def _coarse_solve(self, ex: _Executor, level: int):
        ex.sweep(level, f"u{level}", self._rhs_name(level))

    def _cycle_level(self, ex: _Executor, level: int, kind: str):
        if level == len(self.hierarchy) - 1:
            self._coarse_solve(ex, level)
            return
        self._relax(ex, level)
        self._restrict(ex, level)
        coarsest = level + 1 == len(self.hierarchy) - 1
        if kind == "F" and not coarsest:
            self._cycle_level(ex, level + 1, "F")
        self._cycle_level(ex, level + 1, "V")
        self._correct(ex, level)
        self._f_relax(ex, level)

    # -- public operations -------------------------------------------------------

    def cycle(self, u: np.ndarray, rho, tape=None) -> np.ndarray:
        """One MGRIT iteration ``H(u, rho)``; ``u`` is left untouched."""
        self._check_state(u)
        arrays = {"u0": np.array(u, dtype=float)}
        if tape is not None:
            tape.begin(self, u, rho)
        ex = _Executor(self, arrays, rho, tape)
        self._cycle_level(ex, 0, self.config.cycle_type)
        if tape is not None:
            tape.end()
        return arrays["u0"]

    def f_relax(self, level: int, u: np.ndarray, rho, g: np.ndarray | None = None) -> np.ndarray:
        return self._relax_public(level, u, rho, g, "F")

    def c_relax(self, level: int, u: np.ndarray, rho, g: np.ndarray | None = None) -> np.ndarray:
        return self._relax_public(level, u, rho, g, "C")

    def fcf_relax(self, level: int, u: np.ndarray, rho, g: np.ndarray | None = None) -> np.ndarray:
        return self._relax_public(level, u, rho, g, "FCF")

    def _relax_public(self, level, u, rho, g, pattern):
        arrays = {f"u{level}": np.array(u, dtype=float)}
        if level > 0:
            arrays[f"g{level}"] = np.zeros_like(arrays[f"u{level}"]) if g is None else np.asarray(g, dtype=float)
        ex = _Executor(self, arrays, rho)
        for sweep in pattern:
            (self._f_relax if sweep == "F" else self._c_relax)(ex, level)
        return arrays[f"u{level}"]

    def restrict_fas(self, level: int, u: np.ndarray, rho, g: np.ndarray | None = None):
        """Return ``(coarse_state, coarse_rhs)`` for the level below ``level``."""
        if level + 1 >= len(self.hierarchy):
            raise InvalidConfig(f"level {level} has no coarser level")
        arrays = {f"u{level}": np.array(u, dtype=float)}
        if level > 0:
            arrays[f"g{level}"] = np.zeros_like(arrays[f"u{level}"]) if g is None else np.asarray(g, dtype=float)
        ex = _Executor(self, arrays, rho)
        self._restrict(ex, level)
        return arrays[f"u{level + 1}"], arrays[f"g{level + 1}"]

    def coarse_solve(self, level: int, u: np.ndarray, rho, g: np.ndarray | None = None) -> np.ndarray:
        """Sequential solve of ``u[j] = Phi_level(u[j-1]) + g[j]`` from ``u[0]``."""
        arrays = {f"u{level}": np.array(u, dtype=float)}
        if level > 0:
            arrays[f"g{level}"] = np.zeros_like(arrays[f"u{level}"]) if g is None else np.asarray(g, dtype=float)
        ex = _Executor(self, arrays, rho)
        self._coarse_solve(ex, level)
        return arrays[f"u{level}"]

    def residuals(self, u: np.ndarray, rho) -> np.ndarray:
        """Rows ``Phi(u^{i-1}) - u^i`` for i = 1..N on the fine level."""
        self._check_state(u)
        prop = self.propagators[0]
        y = self.pool.map_rows(lambda x: prop.forward(x, rho), u[:-1])
        return y - u[1:]

    def residual_norm(self, u: np.ndarray, rho) -> float:
        if self.N == 0:
            return 0.0
        r = self.residuals(u, rho)
        return float(np.sqrt(np.sum(r * r)))

    def solve(self, rho, u: np.ndarray | None = None, tol: float | None = None, max_iters: int | None = None):
        """Iterate ``u <- H(u, rho)`` until the successive-iterate norm has
        dropped by ``tol`` relative to its first value.

        Returns ``(u, ConvergenceRecord)``; raises :class:`MaxItersExceeded`
        carrying both when the cap is hit first.
        """
        tol = self.config.halting_tol if tol is None else tol
        max_iters = self.config.max_iters if max_iters is None else max_iters
        u = self.initial_guess() if u is None else np.array(u, dtype=float)
        record = ConvergenceRecord()
        first = None
        for _ in range(max_iters):
            t0 = time.perf_counter()
            u_new = self.cycle(u, rho)
            diff = float(np.linalg.norm(u_new - u))
            record.append(diff, wall=time.perf_counter() - t0)
            u = u_new
            first = diff if first is None else first
            logger.debug("mgrit iter %d: |du| = %.3e", record.cycles, diff)
            if diff <= tol * first or diff == 0.0:
                return u, record
        raise MaxItersExceeded(f"MGRIT did not converge in {max_iters} cycles", partial=(u, record))

    def _check_state(self, u):
        if u.shape != (self.N + 1, self.u0.size):
            raise ValueError(f"state shape {u.shape} != {(self.N + 1, self.u0.size)}")


def serial_solve(stepper, N: int, dt: float, rho, counter: CostCounter | None = None) -> np.ndarray:
    """Plain sequential time stepping; the reference the MGRIT limit must match."""
    u = np.empty((N + 1, stepper.dim))
    u[0] = stepper.initial_state()
    for i in range(1, N + 1):
        u[i] = stepper.step(u[i - 1], rho, dt)
    if counter is not None:
        counter.add(0, np.arange(N), 1, adjoint=False, sequential=True)
    return u


def estimate_contraction(history: ConvergenceRecord | Sequence[float], stagnation: float = 0.99) -> float:
    """Geometric-mean ratio of successive norms over the tail half of a history."""
    norms = np.asarray(history.state_norms if isinstance(history, ConvergenceRecord) else history, dtype=float)
    if norms.size < 3:
        raise InsufficientData(f"need at least 3 residual norms, got {norms.size}")
    tail = norms[norms.size // 2:]
    if np.any(tail == 0.0):
        return 0.0
    eta = float((tail[-1] / tail[0]) ** (1.0 / (tail.size - 1)))
    if eta >= stagnation:
        warnings.warn(f"residual history is stagnating (eta = {eta:.3f})", RuntimeWarning, stacklevel=2)
    return eta
