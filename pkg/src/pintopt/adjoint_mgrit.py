"""Transpose of an MGRIT cycle and the piggyback state/adjoint iteration.

A :class:`CycleTape` records the primitives of one primal cycle together with
the inputs of every step.  Sweeping the tape backwards, with each step replaced
by the stepper's ``step_adjoint`` at its recorded input, applies
``(dH/du)^T`` and ``(dH/drho)^T`` exactly (to rounding), for any cycle type
and relaxation pattern.

Adjoint space-time states have the same ``(N + 1, M)`` layout as primal ones;
row 0 belongs to the fixed initial condition and is always zero.
"""

from __future__ import annotations

import time

import numpy as np

from .errors import MaxItersExceeded, TapeMismatch
from .mgrit import AllocAction, CombineAction, ConvergenceRecord, Mgrit, StepAction, SweepAction, _Executor


class CycleTape:
    """Primitive actions of the most recent primal cycle."""

    def __init__(self):
        self.actions: list = []
        self.solver: Mgrit | None = None
        self.u_in: np.ndarray | None = None
        self.rho = None
        self.complete = False

    def begin(self, solver: Mgrit, u: np.ndarray, rho):
        self.actions = []
        self.solver = solver
        self.u_in = np.array(u, dtype=float)
        self.rho = np.array(rho, dtype=float, ndmin=1)
        self.complete = False

    def record(self, action):
        self.actions.append(action)

    def end(self):
        self.complete = True

    def __len__(self):
        return len(self.actions)

    def replay(self) -> np.ndarray:
        """Re-run the recorded cycle forward from its input; returns the output."""
        self._check()
        arrays = {"u0": self.u_in.copy()}
        ex = _Executor(self.solver, arrays, self.rho, counting=False)
        for act in self.actions:
            if isinstance(act, AllocAction):
                ex.alloc(act.name, act.shape)
            elif isinstance(act, StepAction):
                ex.step(act.level, act.dst, act.di, act.src, act.si, act.add, act.ai)
            elif isinstance(act, SweepAction):
                ex.sweep(act.level, act.name, act.add)
            else:
                ex.combine(act.dst, act.di, act.terms)
        return arrays["u0"]

    def transpose(self, ybar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``((dH/du)^T ybar, (dH/drho)^T ybar)`` at the taped input."""
        self._check()
        if ybar.shape != self.u_in.shape:
            raise TapeMismatch(f"adjoint shape {ybar.shape} != taped state shape {self.u_in.shape}")
        solver, rho = self.solver, self.rho
        bars = {"u0": np.array(ybar, dtype=float)}
        for act in self.actions:
            if isinstance(act, AllocAction):
                bars[act.name] = np.zeros(act.shape)
        rho_bar = np.zeros_like(rho)

        for act in reversed(self.actions):
            if isinstance(act, StepAction):
                yb = bars[act.dst][act.di]
                bars[act.dst][act.di] = 0.0
                prop = solver.propagators[act.level]
                xb, rb = solver.pool.map_rows(lambda x, y: prop.adjoint(x, y, rho), act.x, yb)
                bars[act.src][act.si] += xb
                if act.add is not None:
                    bars[act.add][act.ai] += yb
                rho_bar += rb.sum(axis=0)
                solver.counter.add(
                    act.level, act.si * solver.hierarchy[act.level].stride, prop.repeats, adjoint=True, sequential=False
                )
            elif isinstance(act, SweepAction):
                prop = solver.propagators[act.level]
                ub = bars[act.name]
                gb = bars[act.add] if act.add is not None else None
                for j in range(act.n, 0, -1):
                    yb = ub[j].copy()
                    ub[j] = 0.0
                    if gb is not None:
                        gb[j] += yb
                    xb, rb = prop.adjoint(act.x[j - 1], yb, rho)
                    ub[j - 1] += xb
                    rho_bar += rb
                solver.counter.add(
                    act.level,
                    np.arange(act.n) * solver.hierarchy[act.level].stride,
                    prop.repeats,
                    adjoint=True,
                    sequential=True,
                )
            elif isinstance(act, CombineAction):
                yb = bars[act.dst][act.di]
                bars[act.dst][act.di] = 0.0
                for coef, name, idx in act.terms:
                    bars[name][idx] += coef * yb
            else:
                # a name may be allocated more than once per cycle (F-cycles);
                # earlier uses of it start from a fresh zero adjoint
                bars[act.name] = np.zeros(act.shape)
        xbar = bars["u0"]
        # the initial condition is not a variable of H
        xbar[0] = 0.0
        return xbar, rho_bar

    def _check(self):
        if self.solver is None or not self.complete:
            raise TapeMismatch("tape holds no complete cycle")


def adjoint_cycle(tape: CycleTape, ubar: np.ndarray, u: np.ndarray, rho, model):
    """``ubar_new = grad_u J(u, rho) + (dH/du)^T ubar`` and ``g_partial = (dH/drho)^T ubar``."""
    if tape.u_in is None or u.shape != tape.u_in.shape or not np.array_equal(u, tape.u_in):
        raise TapeMismatch("tape was not recorded at this state")
    if not np.array_equal(np.atleast_1d(np.asarray(rho, dtype=float)), tape.rho):
        raise TapeMismatch("tape was not recorded at this design")
    hbar, g_partial = tape.transpose(ubar)
    return model.objective_grad_state(u, rho) + hbar, g_partial


class Piggyback:
    """Simultaneous state and adjoint MGRIT iteration for one design.

    ``model`` supplies the objective partials; the solver's stepper supplies
    ``step_adjoint``.
    """

    def __init__(self, solver: Mgrit, model):
        self.solver = solver
        self.model = model
        self._frozen = None

    def initial_adjoint(self) -> np.ndarray:
        return np.zeros((self.solver.N + 1, self.solver.u0.size))

    def iterate(self, u: np.ndarray, ubar: np.ndarray, rho):
        """One piggyback step; both updates are evaluated at the incoming ``u``.

        Returns ``(u_new, ubar_new, g, (|u_new - u|, |ubar_new - ubar|))`` where
        ``g = grad_rho J(u, rho) + (dH/drho)^T ubar``.
        """
        tape = CycleTape()
        u_new = self.solver.cycle(u, rho, tape)
        ubar_new, g_partial = adjoint_cycle(tape, ubar, u, rho, self.model)
        g = self.model.objective_grad_design(u, rho) + g_partial
        norms = (float(np.linalg.norm(u_new - u)), float(np.linalg.norm(ubar_new - ubar)))
        return u_new, ubar_new, g, norms

    def solve(self, rho, tol: float = 1e-9, max_iters: int = 200, u=None, ubar=None, record=None, reference=None):
        """Iterate until both successive-iterate norms drop by ``tol`` relative
        to their first values, or to ``reference = (state, adjoint)`` when given
        (useful for warm starts, whose first increments are already small).
        Returns ``(u, ubar, g, ConvergenceRecord)``.
        """
        if tol <= 0:
            raise ValueError("tol must be positive")
        u = self.solver.initial_guess() if u is None else u
        ubar = self.initial_adjoint() if ubar is None else ubar
        record = ConvergenceRecord() if record is None else record
        first = None if reference is None else tuple(reference)
        g = None
        for _ in range(max_iters):
            t0 = time.perf_counter()
            J = self.model.objective(u, rho)
            u, ubar, g, norms = self.iterate(u, ubar, rho)
            record.append(norms[0], norms[1], np.linalg.norm(g), J, time.perf_counter() - t0)
            first = norms if first is None else first
            if all(n <= tol * f or n == 0.0 for n, f in zip(norms, first)):
                return u, ubar, g, record
        raise MaxItersExceeded(
            f"piggyback iteration did not reach tol={tol:g} in {max_iters} iterations", partial=(u, ubar, g, record)
        )

    def adjoint_only_iterate(self, u: np.ndarray, ubar: np.ndarray, rho) -> np.ndarray:
        """One adjoint update at a frozen (converged) state ``u``."""
        rho_arr = np.atleast_1d(np.asarray(rho, dtype=float))
        if self._frozen is None or self._frozen[0] is not u or not np.array_equal(self._frozen[1], rho_arr):
            tape = CycleTape()
            self.solver.cycle(u, rho, tape)
            self._frozen = (u, rho_arr, tape)
        ubar_new, _ = adjoint_cycle(self._frozen[2], ubar, u, rho, self.model)
        return ubar_new


def serial_adjoint(model, u: np.ndarray, rho, dt: float, counter=None):
    """Backward time-stepping adjoint and the exact reduced gradient.

    ``lam^i = grad_{u^i} J + (dPhi(u^i)/du)^T lam^{i+1}``, ``lam^{N+1} = 0``;
    returns ``(lam, grad)`` with ``grad = grad_rho J + sum_i (dPhi(u^{i-1})/drho)^T lam^i``.
    """
    N = u.shape[0] - 1
    gJ = model.objective_grad_state(u, rho)
    lam = np.zeros_like(u)
    grad = np.array(model.objective_grad_design(u, rho), dtype=float)
    carry = np.zeros(u.shape[1])
    for i in range(N, 0, -1):
        lam[i] = gJ[i] + carry
        carry, rb = model.step_adjoint(u[i - 1], rho, lam[i], dt, u_next=u[i])
        grad += rb
    if counter is not None:
        counter.add(0, np.arange(N), 1, adjoint=True, sequential=True)
    return lam, grad


def estimate_time_lag(record: ConvergenceRecord) -> float:
    """Largest observed ``|ubar_{k+1} - ubar_k| / |u_{k+1} - u_k|`` over a history."""
    s = np.asarray(record.state_norms, dtype=float)
    a = np.asarray(record.adjoint_norms, dtype=float)
    ok = (s > 0) & np.isfinite(a)
    if not ok.any():
        raise ValueError("no usable entries in the record")
    return float(np.max(a[ok] / s[ok]))
