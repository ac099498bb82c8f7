"""Van der Pol oscillator driving an advection-diffusion field.

The state at one time point is a flat array ``[z, w, v_1, ..., v_L]`` of
length ``M = L + 2``.  Batches of states are arrays of shape ``(B, M)``; every
routine here accepts either form.

Time stepping is Crank-Nicolson.  The oscillator pair is solved by functional
(Picard) iteration with ``z**2`` lagged; the field equation is linear in
``v`` and in the inflow value ``z``, so its Crank-Nicolson update is a fixed
affine map per step size that is formed once and cached.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidConfig, NonConvergence, SingularLinearization

__all__ = [
    "DesignVector",
    "ModelConfig",
    "ModelState",
    "VanDerPolAdvection",
    "as_design",
]


@dataclass(frozen=True)
class ModelConfig:
    a: float = 1.0
    mu: float = 1e-5
    dx: float = 0.01
    L: int = 100
    dt: float = 5e-4
    N: int = 60000
    T: float = 30.0
    picard_tol: float = 1e-12
    picard_max: int = 100
    gamma: float = 1e-6
    rho_target: float = 3.0
    # None -> computed from a serial sweep at rho_target
    a_target: float | None = None
    # drop the rho*z^2*w term so the stepper is linear in the state
    linear: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise InvalidConfig("dt and dx must be positive")
        if self.mu < 0:
            raise InvalidConfig("mu must be non-negative")
        if self.L < 3:
            raise InvalidConfig("L must be at least 3")
        if self.N < 0:
            raise InvalidConfig("N must be non-negative")
        if abs(self.N * self.dt - self.T) > 1e-12 * max(abs(self.T), 1.0):
            raise InvalidConfig(f"N*dt = {self.N * self.dt!r} does not match T = {self.T!r}")
        if abs(self.L * self.dx - 1.0) > 1e-12:
            raise InvalidConfig(f"L*dx = {self.L * self.dx!r} must equal 1")
        if self.picard_tol <= 0 or self.picard_max < 1:
            raise InvalidConfig("picard_tol must be positive and picard_max >= 1")

    @property
    def M(self) -> int:
        return self.L + 2

    def with_steps(self, N: int) -> "ModelConfig":
        """Same physics on ``N`` fine steps of the same ``dt`` (``T`` follows)."""
        return replace(self, N=N, T=N * self.dt)


@dataclass
class ModelState:
    """Named view of one packed state vector."""

    z: float
    w: float
    v: np.ndarray = field(repr=False)

    @classmethod
    def from_array(cls, u: np.ndarray) -> "ModelState":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]), u[2:].copy())

    def to_array(self) -> np.ndarray:
        return np.concatenate(([self.z, self.w], np.asarray(self.v, dtype=float)))


DesignVector = np.ndarray


def as_design(rho) -> np.ndarray:
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if rho.ndim != 1 or not np.all(np.isfinite(rho)):
        raise ValueError(f"design must be a finite 1-d vector, got {rho!r}")
    return rho


def _field_operator(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Semi-discrete field equation ``dv/dt = K v + b z``.

    Second-order upwind advection (first order at the first node), central
    diffusion, Robin inflow closed with a one-sided difference, and the outflow
    condition ``v_xx = 0`` folded in as linear extrapolation.
    """
    L, dx, a, mu = cfg.L, cfg.dx, cfg.a, cfg.mu
    beta = mu / dx
    # ghost value at x=0: v_0 = cz*z + cv*v_1
    cz, cv = 1.0 / (1.0 + beta), beta / (1.0 + beta)
    K = np.zeros((L, L))
    b = np.zeros(L)

    # advection, -a * dv/dx
    K[0, 0] -= a / dx * (1.0 - cv)
    b[0] += a / dx * cz
    K[1, 1] -= a * 3.0 / (2 * dx)
    K[1, 0] += a * 4.0 / (2 * dx)
    K[1, 0] -= a * cv / (2 * dx)
    b[1] -= a * cz / (2 * dx)
    for i in range(2, L):
        K[i, i] -= a * 3.0 / (2 * dx)
        K[i, i - 1] += a * 4.0 / (2 * dx)
        K[i, i - 2] -= a / (2 * dx)

    # diffusion; the last row vanishes under the outflow extrapolation
    d = mu / dx**2
    K[0, 0] += d * (cv - 2.0)
    K[0, 1] += d
    b[0] += d * cz
    for i in range(1, L - 1):
        K[i, i - 1] += d
        K[i, i] -= 2 * d
        K[i, i + 1] += d
    return K, b


class VanDerPolAdvection:
    """Time stepper, adjoint step and tracking objective of the model problem.

    Instances are stateless apart from a cache of field propagators keyed by
    step size, so they can be shared between worker threads.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg if cfg is not None else ModelConfig()
        self._K, self._b = _field_operator(self.cfg)
        self._weights = np.concatenate(([1.0, 1.0], np.full(self.cfg.L, self.cfg.dx)))
        self._a_target = self.cfg.a_target

    @property
    def dim(self) -> int:
        return self.cfg.M

    @property
    def n_design(self) -> int:
        return 1

    def initial_state(self) -> np.ndarray:
        u0 = np.ones(self.cfg.M)
        return u0

    @functools.lru_cache(maxsize=16)
    def field_propagator(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(Q, r)`` with ``v_new = Q v_old + r (z_old + z_new)``."""
        h = 0.5 * dt
        eye = np.eye(self.cfg.L)
        P = eye - h * self._K
        Q = np.linalg.solve(P, eye + h * self._K)
        r = np.linalg.solve(P, h * self._b)
        return Q, r

    @functools.lru_cache(maxsize=16)
    def _propagator_t(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        # row-major transposes so batched products are plain GEMMs
        Q, r = self.field_propagator(dt)
        return np.ascontiguousarray(Q.T), Q

    # -- oscillator ---------------------------------------------------------

    def _vdp_scalar(self, z0, w0, rho, h):
        tol, nonlin = self.cfg.picard_tol, not self.cfg.linear
        f0 = -z0 + rho * (1.0 - z0 * z0) * w0 if nonlin else -z0 + rho * w0
        b1 = z0 + h * w0
        b2 = w0 + h * f0
        z, w = z0, w0
        for _ in range(self.cfg.picard_max):
            c = rho * (1.0 - z * z) if nonlin else rho
            det = (1.0 - h * c) + h * h
            zn = (b1 * (1.0 - h * c) + h * b2) / det
            wn = (b2 - h * b1) / det
            delta = max(abs(zn - z), abs(wn - w))
            z, w = zn, wn
            if delta <= tol:
                return z, w
            if not math.isfinite(delta):
                break
        raise NonConvergence(
            f"Picard iteration did not reach {tol:g} in {self.cfg.picard_max} iterations (dt={2 * h:g})"
        )

    def _vdp_batch(self, z0, w0, rho, h):
        tol, nonlin = self.cfg.picard_tol, not self.cfg.linear
        f0 = -z0 + rho * (1.0 - z0 * z0) * w0 if nonlin else -z0 + rho * w0
        b1 = z0 + h * w0
        b2 = w0 + h * f0
        z, w = z0.copy(), w0.copy()
        idx = np.arange(z.size)
        for _ in range(self.cfg.picard_max):
            zi, wi, b1i, b2i = z[idx], w[idx], b1[idx], b2[idx]
            c = rho * (1.0 - zi * zi) if nonlin else rho
            det = (1.0 - h * c) + h * h
            zn = (b1i * (1.0 - h * c) + h * b2i) / det
            wn = (b2i - h * b1i) / det
            delta = np.maximum(np.abs(zn - zi), np.abs(wn - wi))
            z[idx], w[idx] = zn, wn
            # rows leave the iteration independently so results do not depend
            # on which other rows share the batch
            idx = idx[~(delta <= tol)]
            if idx.size == 0:
                return z, w
            if not np.all(np.isfinite(delta)):
                break
        raise NonConvergence(
            f"Picard iteration did not converge for {idx.size} of {z.size} states (dt={2 * h:g})"
        )

    # -- stepping -------------------------------------------------------------

    def step(self, u: np.ndarray, rho, dt: float) -> np.ndarray:
        """One Crank-Nicolson step of length ``dt`` for a state or a batch."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        rho = float(as_design(rho)[0])
        h = 0.5 * dt
        QT, _ = self._propagator_t(float(dt))
        _, r = self.field_propagator(float(dt))
        out = np.empty_like(u, dtype=float)
        if u.ndim == 1:
            z0, w0 = float(u[0]), float(u[1])
            z1, w1 = self._vdp_scalar(z0, w0, rho, h)
            out[0], out[1] = z1, w1
            out[2:] = u[2:] @ QT
            out[2:] += (z0 + z1) * r
        else:
            z0, w0 = u[:, 0], u[:, 1]
            z1, w1 = self._vdp_batch(z0, w0, rho, h)
            out[:, 0], out[:, 1] = z1, w1
            out[:, 2:] = u[:, 2:] @ QT
            out[:, 2:] += (z0 + z1)[:, None] * r
        return out

    def step_residual(self, u_prev: np.ndarray, u: np.ndarray, rho, dt: float) -> float:
        """Max-norm residual of the Crank-Nicolson equations at ``(u_prev, u)``."""
        rho = float(as_design(rho)[0])
        h = 0.5 * dt
        u_prev, u = np.atleast_2d(u_prev), np.atleast_2d(u)
        z0, w0, v0 = u_prev[:, 0], u_prev[:, 1], u_prev[:, 2:]
        z1, w1, v1 = u[:, 0], u[:, 1], u[:, 2:]
        if self.cfg.linear:
            f0, f1 = -z0 + rho * w0, -z1 + rho * w1
        else:
            f0 = -z0 + rho * (1 - z0**2) * w0
            f1 = -z1 + rho * (1 - z1**2) * w1
        rz = z1 - z0 - h * (w0 + w1)
        rw = w1 - w0 - h * (f0 + f1)
        rv = v1 - v0 - h * ((v0 + v1) @ self._K.T + np.outer(z0 + z1, self._b))
        return float(max(np.abs(rz).max(), np.abs(rw).max(), np.abs(rv).max()))

    def step_adjoint(self, u_prev: np.ndarray, rho, ubar: np.ndarray, dt: float, u_next=None):
        """Transpose-Jacobian products of one step.

        Returns ``(ubar_prev, rho_bar)`` where ``ubar_prev = (d step/du)^T ubar``
        and ``rho_bar = (d step/d rho)^T ubar``; for a batch ``rho_bar`` has one
        row per state.  The Jacobian is that of the converged Crank-Nicolson
        system, evaluated at ``u_next`` (recomputed when omitted).
        """
        rho = float(as_design(rho)[0])
        h = 0.5 * dt
        single = u_prev.ndim == 1
        u_prev, ubar = np.atleast_2d(u_prev), np.atleast_2d(ubar)
        if u_next is None:
            u_next = self.step(u_prev, rho, dt)
        u_next = np.atleast_2d(u_next)
        _, Q = self._propagator_t(float(dt))
        _, r = self.field_propagator(float(dt))
        out = np.empty_like(ubar, dtype=float)
        vbar = ubar[:, 2:]
        out[:, 2:] = vbar @ Q
        s = vbar @ r

        z0, w0 = u_prev[:, 0], u_prev[:, 1]
        z1, w1 = u_next[:, 0], u_next[:, 1]
        zb, wb = ubar[:, 0] + s, ubar[:, 1]
        if self.cfg.linear:
            j0 = j1 = np.full_like(z0, -1.0)
            c0 = c1 = np.full_like(z0, rho)
            drho = h * (w0 + w1)
        else:
            j0, j1 = -1.0 - 2.0 * rho * z0 * w0, -1.0 - 2.0 * rho * z1 * w1
            c0, c1 = rho * (1.0 - z0 * z0), rho * (1.0 - z1 * z1)
            drho = h * ((1.0 - z0 * z0) * w0 + (1.0 - z1 * z1) * w1)
        # (I - h J1)^T lam = ybar, J = [[0, 1], [j, c]]
        a11, a12, a21, a22 = 1.0, -h * j1, -h, 1.0 - h * c1
        det = a11 * a22 - a12 * a21
        if not np.all(np.isfinite(det)) or np.any(np.abs(det) < 1e-14):
            raise SingularLinearization("implicit oscillator Jacobian is singular")
        lz = (a22 * zb - a12 * wb) / det
        lw = (a11 * wb - a21 * zb) / det
        # (I + h J0)^T lam
        out[:, 0] = lz + h * j0 * lw + s
        out[:, 1] = h * lz + (1.0 + h * c0) * lw
        rho_bar = (lw * drho)[:, None]
        if single:
            return out[0], rho_bar[0]
        return out, rho_bar

    # -- objective ----------------------------------------------------------

    def state_norms(self, u: np.ndarray) -> np.ndarray:
        """Weighted squared norm ``z^2 + w^2 + dx * sum(v^2)`` per state."""
        u = np.atleast_2d(u)
        return (u * u) @ self._weights

    def space_time_average(self, u: np.ndarray) -> float:
        """Average state norm over the fine points ``1..N`` of ``u`` (row 0 is u^0)."""
        n = u.shape[0] - 1
        if n < 1:
            raise ValueError("need at least one time step")
        return float(self.state_norms(u[1:]).sum() / n)

    @property
    def a_target(self) -> float:
        if self._a_target is None:
            self._a_target = _target_average(self.cfg)
        return self._a_target

    def objective(self, u: np.ndarray, rho) -> float:
        rho = as_design(rho)
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite state passed to objective")
        S = self.space_time_average(u)
        return 0.5 * (S - self.a_target) ** 2 + 0.5 * self.cfg.gamma * float(rho @ rho)

    def objective_grad_state(self, u: np.ndarray, rho, i: int | None = None) -> np.ndarray:
        """Partial gradient with respect to ``u^i``, or all rows when ``i`` is None.

        The full form has the shape of ``u`` with row 0 (the fixed initial
        condition) zero.
        """
        n = u.shape[0] - 1
        outer = (self.space_time_average(u) - self.a_target) * 2.0 / n
        if i is not None:
            if not 1 <= i <= n:
                raise IndexError(f"time index {i} outside 1..{n}")
            return outer * self._weights * u[i]
        g = outer * self._weights * u
        g[0] = 0.0
        return g

    def objective_grad_design(self, u: np.ndarray, rho) -> np.ndarray:
        return self.cfg.gamma * as_design(rho)

    def serial_sweep(self, rho, n: int | None = None, dt: float | None = None) -> np.ndarray:
        """States ``u^0..u^n`` from plain sequential stepping."""
        n = self.cfg.N if n is None else n
        dt = self.cfg.dt if dt is None else dt
        u = np.empty((n + 1, self.dim))
        u[0] = self.initial_state()
        for i in range(1, n + 1):
            u[i] = self.step(u[i - 1], rho, dt)
        return u


@functools.lru_cache(maxsize=8)
def _target_average(cfg: ModelConfig) -> float:
    # the target is defined by the design rho_target on the same discretization
    model = VanDerPolAdvection(replace(cfg, a_target=0.0))
    return model.space_time_average(model.serial_sweep(cfg.rho_target))
