"""Forward solvers: the elliptic boundary-value problem and the parabolic
initial-boundary-value problem with backward-Euler time stepping.

Used both to manufacture observation data on fine meshes and inside the
inversion loop (where the elliptic solver appears through the reformulated
state equations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (GridFunction, assemble_mass, assemble_stiffness,
                  dirichlet_solve, measure, restrict_interior)
from .linsolve import SolverFailure, solve_spd


@dataclass(frozen=True)
class EllipticProblem:
    """-div(D grad u) + sigma u = f in Omega, u = g on the boundary."""

    D: GridFunction
    sigma: GridFunction
    f: GridFunction
    g: GridFunction

    def __post_init__(self):
        mesh = self.D.mesh
        for other in (self.sigma, self.f, self.g):
            if (other.mesh.dim, other.mesh.n) != (mesh.dim, mesh.n):
                raise ValueError("problem fields live on different meshes")
        if self.D.values.min() <= 0:
            raise ValueError("diffusion coefficient must be strictly positive")
        if self.sigma.values.min() < 0:
            raise ValueError("potential must be nonnegative")


def solve_elliptic(problem, tol=1e-10):
    """FE solution of the elliptic problem; returns (u, SolveReport)."""
    mesh = problem.D.mesh
    a = assemble_stiffness(problem.D) + assemble_mass(problem.sigma)
    load = mesh.unit_mass().matvec(problem.f.values)
    u, report = dirichlet_solve(a, load, problem.g.values, mesh, tol=tol)
    return GridFunction(mesh, u), report


class SourceSchedule:
    """Time-dependent source: f1 for t <= t_lo, f2 for t >= t_hi, and a
    smooth sine bridge in between (the built-in parabolic examples use
    t_lo=1.5, t_hi=3.5 with constant levels 1 and 10)."""

    def __init__(self, f1, f2, t_lo=None, t_hi=None):
        if (t_lo is None) != (t_hi is None):
            raise ValueError("t_lo and t_hi must be given together")
        if t_lo is not None and not t_lo < t_hi:
            raise ValueError("need t_lo < t_hi")
        self.f1 = f1
        self.f2 = f2
        self.t_lo = t_lo
        self.t_hi = t_hi

    @classmethod
    def constant(cls, f):
        return cls(f, f)

    def blend(self, t):
        """Bridge weight in [0, 1]: 0 up to t_lo, 1 from t_hi on."""
        if self.t_lo is None or t <= self.t_lo:
            return 0.0
        if t >= self.t_hi:
            return 1.0
        mid = 0.5 * (self.t_lo + self.t_hi)
        return 0.5 * (1.0 + np.sin(np.pi * (t - mid) / (self.t_hi - self.t_lo)))

    def at(self, t):
        """Nodal source values at time t."""
        s = self.blend(t)
        if s == 0.0:
            return self.f1.values
        if s == 1.0:
            return self.f2.values
        return (1.0 - s) * self.f1.values + s * self.f2.values


@dataclass(frozen=True)
class ParabolicProblem:
    D: GridFunction
    sigma: GridFunction
    g: GridFunction
    u0: GridFunction
    source_schedule: SourceSchedule
    T_final: float
    n_steps: int

    def __post_init__(self):
        mesh = self.D.mesh
        for other in (self.sigma, self.g, self.u0):
            if (other.mesh.dim, other.mesh.n) != (mesh.dim, mesh.n):
                raise ValueError("problem fields live on different meshes")
        if self.D.values.min() <= 0:
            raise ValueError("diffusion coefficient must be strictly positive")
        if self.sigma.values.min() < 0:
            raise ValueError("potential must be nonnegative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.T_final <= 0:
            raise ValueError("T_final must be positive")


@dataclass
class Trajectory:
    """Snapshots of a parabolic solve at selected integer step times."""

    mesh: object
    tau: float
    T_final: float
    n_steps: int
    snapshots: dict = field(default_factory=dict)

    def step_of(self, t):
        m = t / self.tau
        mr = round(m)
        if abs(m - mr) > 1e-9 * max(1.0, abs(m)):
            raise ValueError(f"time {t} does not lie on the step grid tau={self.tau}")
        return int(mr)

    def at_step(self, m):
        if m not in self.snapshots:
            raise ValueError(f"step {m} (t={m * self.tau}) was not stored")
        return GridFunction(self.mesh, self.snapshots[m])

    def at_time(self, t):
        return self.at_step(self.step_of(t))

    def window_samples(self, T, theta):
        """(time, GridFunction) pairs stored inside [T - theta, T]."""
        m_hi = self.step_of(T)
        m_lo = int(np.ceil((T - theta) / self.tau - 1e-9))
        out = []
        for m in range(m_lo, m_hi + 1):
            if m in self.snapshots:
                out.append((m * self.tau, GridFunction(self.mesh, self.snapshots[m])))
        return out


def _window_steps(windows, tau, n_steps):
    keep = set()
    for win in windows:
        T, theta = win[0], win[1]
        stride = win[2] if len(win) > 2 else 1
        m_hi = T / tau
        if abs(m_hi - round(m_hi)) > 1e-9 * max(1.0, m_hi):
            raise ValueError(f"window end T={T} does not lie on the step grid")
        m_hi = int(round(m_hi))
        if not 0 < m_hi <= n_steps:
            raise ValueError(f"window end T={T} outside (0, T_final]")
        m_lo = max(0, int(np.ceil((T - theta) / tau - 1e-9)))
        keep.update(range(m_lo, m_hi + 1, stride))
        keep.add(m_hi)
    return keep


def solve_parabolic(problem, windows, tol=1e-10, store_steps=None, store_all=False):
    """Implicit Euler march; returns a Trajectory with the requested snapshots.

    windows is a list of (T_i, theta[, stride]); every step inside the
    closed window [T_i - theta, T_i] is retained (subject to the stride),
    plus any explicitly requested step indices.
    """
    mesh = problem.D.mesh
    tau = problem.T_final / problem.n_steps
    keep = _window_steps(windows, tau, problem.n_steps)
    if store_steps:
        keep.update(int(m) for m in store_steps)
    if store_all:
        keep.update(range(problem.n_steps + 1))

    mass1 = mesh.unit_mass()
    a_full = (assemble_stiffness(problem.D) + assemble_mass(problem.sigma)
              + mass1.scaled(1.0 / tau))
    a_int = restrict_interior(a_full, mesh)
    interior = mesh.interior_idx
    lift = np.where(mesh.boundary_mask, problem.g.values, 0.0)
    a_lift_int = a_full.matvec(lift)[interior]

    u = problem.u0.values.copy()
    traj = Trajectory(mesh, tau, problem.T_final, problem.n_steps)
    if 0 in keep:
        traj.snapshots[0] = u.copy()
    x_prev = u[interior]
    for m in range(1, problem.n_steps + 1):
        t = m * tau
        load = mass1.matvec(u / tau + problem.source_schedule.at(t))
        rhs = load[interior] - a_lift_int
        x, report = solve_spd(a_int, rhs, tol=tol, x0=x_prev)
        if not report.converged:
            raise SolverFailure(
                f"parabolic step {m} (t={t:.6g}) failed: residual "
                f"{report.final_relative_residual:.3e}", report)
        u = lift.copy()
        u[interior] = x
        x_prev = x
        if m in keep:
            traj.snapshots[m] = u.copy()
    return traj


def solution_time_decay(traj, times):
    """Diagnostic samples t -> ||(u(t) - u(t - tau)) / tau||_{L2}.

    Both t and t - tau must be stored steps; used to check the decay of the
    time derivative away from source transitions.
    """
    out = []
    for t in times:
        m = traj.step_of(t)
        du = (traj.snapshots[m] - traj.snapshots[m - 1]) / traj.tau
        out.append(measure("L2", GridFunction(traj.mesh, du)))
    return out
