"""
Causal time stepping for ``(d0 M0 + M1 + A) U = F``.

Both schemes are one-step and implicit, start from ``U(t0) = 0`` and only
ever look at forcing values at or before the new time level, so a forcing
that vanishes before ``t_on`` leaves every earlier state exactly zero.

Each step solves a *positive-real* system ``K = D + S`` with ``D = sym(K)``
symmetric positive definite (``M0 / dt`` plus the dissipative part of ``M1``)
and ``S`` skew. Those systems are handed to preconditioned GMRES, with the
block-diagonal ``D`` as preconditioner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

KRYLOV_TOL = 1.0e-10
MAX_ITER = 2000

IMPLICIT_EULER = "euler"
CRANK_NICOLSON = "cn"
SCHEMES = (IMPLICIT_EULER, CRANK_NICOLSON)

Forcing = Callable[[float], "np.ndarray | None"]


class NotPositiveRealError(ValueError):
    """The symmetric part of a step matrix is not positive definite."""


class KrylovError(RuntimeError):
    def __init__(self, message: str, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass(frozen=True, eq=False)
class EvoSystem:
    """``M0``, ``M1`` and skew ``A`` as sparse matrices.

    ``volume`` is the uniform weight of the discrete inner product; it scales
    energies but not the equations.
    """

    M0: sp.csr_matrix
    M1: sp.csr_matrix
    A: sp.csr_matrix
    volume: float = 1.0

    def __post_init__(self):
        mats = [sp.csr_matrix(m) for m in (self.M0, self.M1, self.A)]
        n = mats[0].shape[0]
        if any(m.shape != (n, n) for m in mats):
            raise ValueError("M0, M1 and A must be square of equal size")
        for name, m in zip(("M0", "M1", "A"), mats):
            object.__setattr__(self, name, m)

    @property
    def state_dim(self) -> int:
        return self.M0.shape[0]

    def energy(self, u: np.ndarray) -> float:
        return 0.5 * self.volume * float(np.dot(u, self.M0 @ u))

    def dissipation_rate(self, u: np.ndarray) -> float:
        return self.volume * float(np.dot(u, self.M1 @ u))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.steps


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    forcing_support_start: float | None = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("one state per time node required")

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class WeightedNorm:
    """``|U|_nu = (int |U(t)|^2 exp(-2 nu t) dt)^(1/2)`` on a trajectory."""

    nu: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")

    def __call__(self, traj: Trajectory, volume: float = 1.0) -> float:
        return weighted_norm(traj, self.nu, volume)


def _spd_factor(d: sp.spmatrix):
    """LU of a symmetric matrix with symmetric pivoting; fails unless it is SPD."""
    try:
        lu = spla.splu(sp.csc_matrix(d), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NotPositiveRealError(f"symmetric part is singular: {exc}") from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotPositiveRealError("symmetric part needed non-symmetric pivoting")
    piv = lu.U.diagonal()
    if not np.all(piv > 0):
        raise NotPositiveRealError(
            f"symmetric part is not positive definite (smallest pivot {piv.min():.3e})"
        )
    return lu


class PositiveRealSolver:
    """Reusable solver for a fixed ``K = D + S``."""

    def __init__(self, K, tol: float = KRYLOV_TOL, maxiter: int = MAX_ITER, restart: int = 60):
        self.K = sp.csr_matrix(K)
        self.tol = tol
        self.maxiter = maxiter
        self.restart = restart
        self._lu = _spd_factor(0.5 * (self.K + self.K.T))
        n = self.K.shape[0]
        self._precond = spla.LinearOperator((n, n), matvec=self._lu.solve, dtype=float)
        self.iterations = 0

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        history = []
        x = x0
        rtol = self.tol
        for _ in range(4):
            x, info = spla.gmres(self.K, rhs, x0=x, rtol=rtol, atol=0.0, restart=self.restart,
                                 maxiter=self.maxiter, M=self._precond,
                                 callback=history.append, callback_type="pr_norm")
            res = np.linalg.norm(rhs - self.K @ x) / bnorm
            if res <= self.tol:
                self.iterations += len(history)
                return x
            rtol *= 0.1
        raise KrylovError(
            f"GMRES stalled at relative residual {res:.3e} (target {self.tol:.1e})", history
        )


def solve_positive_real(K, rhs, tol: float = KRYLOV_TOL, maxiter: int = MAX_ITER) -> np.ndarray:
    """Solve ``K x = rhs`` for ``sym(K)`` positive definite to relative residual ``tol``."""
    return PositiveRealSolver(K, tol, maxiter).solve(rhs)


class Stepper:
    """One-step scheme with the step matrix factored once for a fixed ``dt``."""

    def __init__(self, system: EvoSystem, dt: float, scheme: str = CRANK_NICOLSON,
                 tol: float = KRYLOV_TOL):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.system, self.dt, self.scheme = system, float(dt), scheme
        m0dt = system.M0 / self.dt
        if scheme == IMPLICIT_EULER:
            lhs = m0dt + system.M1 + system.A
            self._explicit = m0dt
        else:
            half = 0.5 * (system.M1 + system.A)
            lhs = m0dt + half
            self._explicit = (m0dt - half).tocsr()
        self.solver = PositiveRealSolver(lhs, tol)

    def forcing_time(self, t: float) -> float:
        """Time at which the forcing enters the step ``t -> t + dt``."""
        return t + (self.dt if self.scheme == IMPLICIT_EULER else 0.5 * self.dt)

    def step(self, u: np.ndarray, f: np.ndarray | None) -> np.ndarray:
        rhs = self._explicit @ u
        if f is not None:
            rhs = rhs + f
        return self.solver.solve(rhs, x0=u if np.any(u) else None)


def step_implicit_euler(system: EvoSystem, u: np.ndarray, f_next, dt: float,
                        tol: float = KRYLOV_TOL) -> np.ndarray:
    """``(M0/dt + M1 + A) U_{n+1} = M0 U_n / dt + F_{n+1}``."""
    return Stepper(system, dt, IMPLICIT_EULER, tol).step(u, f_next)


def step_crank_nicolson(system: EvoSystem, u: np.ndarray, f_half, dt: float,
                        tol: float = KRYLOV_TOL) -> np.ndarray:
    """``(M0/dt + (M1 + A)/2) U_{n+1} = (M0/dt - (M1 + A)/2) U_n + F_{n+1/2}``."""
    return Stepper(system, dt, CRANK_NICOLSON, tol).step(u, f_half)


def iterate(system: EvoSystem, forcing: Forcing | None, grid: TimeGrid,
            scheme: str = CRANK_NICOLSON, tol: float = KRYLOV_TOL) -> Iterator[tuple]:
    """Yield ``(n, t_n, U_n, F_used)`` for ``n = 0 .. steps`` starting from ``U_0 = 0``."""
    stepper = Stepper(system, grid.dt, scheme, tol)
    u = np.zeros(system.state_dim)
    t = grid.t0
    yield 0, t, u, None
    for n in range(1, grid.steps + 1):
        f = forcing(stepper.forcing_time(t)) if forcing is not None else None
        try:
            u = stepper.step(u, f)
        except KrylovError as exc:
            raise KrylovError(f"step {n}: {exc}", exc.residuals) from None
        t = grid.t0 + n * grid.dt
        yield n, t, u, f


def run(system: EvoSystem, forcing: Forcing | None, grid: TimeGrid,
        scheme: str = CRANK_NICOLSON, tol: float = KRYLOV_TOL,
        forcing_support_start: float | None = None) -> Trajectory:
    states = [u.copy() for _, _, u, _ in iterate(system, forcing, grid, scheme, tol)]
    return Trajectory(grid.times, np.array(states), forcing_support_start)


def weighted_norm(traj: Trajectory, nu: float, volume: float = 1.0) -> float:
    """Trapezoidal ``(int |U(t)|^2 exp(-2 nu t) dt)^(1/2)`` over the trajectory window."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    sq = volume * np.einsum("ij,ij->i", traj.states, traj.states)
    return float(np.sqrt(np.trapezoid(sq * np.exp(-2.0 * nu * traj.times), traj.times)))


class Causality(NamedTuple):
    pre_onset: float
    peak: float


def causality_check(system: EvoSystem, forcing: Forcing, grid: TimeGrid, t_on: float,
                    scheme: str = CRANK_NICOLSON, tol: float = KRYLOV_TOL) -> Causality:
    """Largest state entry strictly before ``t_on`` and over the whole run."""
    pre, peak = 0.0, 0.0
    for _, t, u, _ in iterate(system, forcing, grid, scheme, tol):
        m = float(np.max(np.abs(u))) if u.size else 0.0
        peak = max(peak, m)
        if t < t_on:
            pre = max(pre, m)
    return Causality(pre, peak)


class EnergyStep(NamedTuple):
    energy: float
    dissipation: float
    work: float
    residual: float


def energy_step(system: EvoSystem, u_prev: np.ndarray, u_next: np.ndarray,
                f: np.ndarray | None, dt: float, scheme: str = CRANK_NICOLSON) -> EnergyStep:
    """Energy bookkeeping of one step; the residual vanishes up to solver error.

    Crank-Nicolson: ``dE + dt <U, sym(M1) U> - dt <U, F>`` at midpoint values.
    Implicit Euler uses end values and adds the numerical dissipation
    ``|U_{n+1} - U_n|^2_{M0} / 2``.
    """
    e_prev, e_next = system.energy(u_prev), system.energy(u_next)
    if scheme == CRANK_NICOLSON:
        ubar = 0.5 * (u_prev + u_next)
        diss = dt * system.dissipation_rate(ubar)
    else:
        ubar = u_next
        jump = u_next - u_prev
        diss = dt * system.dissipation_rate(ubar) + system.energy(jump)
    work = dt * system.volume * float(np.dot(ubar, f)) if f is not None else 0.0
    return EnergyStep(e_next, diss, work, e_next - e_prev + diss - work)


def energy_identity_residual(traj: Trajectory, system: EvoSystem, forcing: Forcing | None,
                             dt: float, scheme: str = CRANK_NICOLSON) -> np.ndarray:
    """Per-step residual of the discrete energy balance along a trajectory."""
    out = np.zeros(len(traj) - 1)
    half = 0.5 * dt if scheme == CRANK_NICOLSON else dt
    for n in range(len(traj) - 1):
        f = forcing(traj.times[n] + half) if forcing is not None else None
        out[n] = energy_step(system, traj.states[n], traj.states[n + 1], f, dt, scheme).residual
    return out


def accretivity_sum(traj: Trajectory) -> float:
    """``sum_n U_n . (U_n - U_{n-1})``, nonnegative whenever ``U_0 = 0``."""
    u = traj.states
    return float(np.sum(u[1:] * (u[1:] - u[:-1])))
