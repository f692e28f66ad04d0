"""Noisy observations and the derived observables consumed by the inverter.

Noise model: z = u + delta * sup|u| * xi with xi standard normal. The
generator is counter-based so every variate is a pure function of
(seed, field id, node index): a splitmix64 output chain hashes the counter,
two hashes feed a Box-Muller transform. Parallel and serial generation
therefore agree, and repeated runs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import GridFunction

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    """splitmix64 output function, vectorized over uint64 (modular wrap)."""
    with np.errstate(over="ignore"):
        z = (z + _GAMMA).astype(np.uint64)
        z ^= z >> np.uint64(30)
        z = (z * _M1).astype(np.uint64)
        z ^= z >> np.uint64(27)
        z = (z * _M2).astype(np.uint64)
        z ^= z >> np.uint64(31)
    return z


def _uniform(counters):
    """Maps hashed counters to (0, 1]; 53-bit resolution."""
    bits = _mix64(counters) >> np.uint64(11)
    return (bits.astype(np.float64) + 1.0) * 2.0 ** -53


def standard_normal_field(seed, field_id, count):
    """count i.i.d. N(0,1) variates keyed by (seed, field_id, node index)."""
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
                  + np.uint64(field_id) * _GAMMA)
    counters = base + np.arange(2 * count, dtype=np.uint64)
    u = _uniform(counters)
    u1, u2 = u[0::2], u[1::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@dataclass(frozen=True)
class NoiseSpec:
    delta: float
    seed: int

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("noise level must be nonnegative")


def add_noise(u, spec, field_id=0):
    """z = u + delta * sup|u| * xi, deterministic in (u, spec, field_id)."""
    if spec.delta == 0.0:
        return GridFunction(u.mesh, u.values.copy())
    xi = standard_normal_field(spec.seed, field_id, u.mesh.n_nodes)
    return GridFunction(u.mesh, u.values + spec.delta * np.abs(u.values).max() * xi)


@dataclass
class WindowObservation:
    """Noisy samples (time, GridFunction) covering [T - theta, T]."""

    T: float
    theta: float
    samples: list


@dataclass
class ObservationSet:
    mode: str  # "elliptic" | "parabolic"
    delta: float
    positivity_floor: float
    z1: GridFunction | None = None
    z2: GridFunction | None = None
    windows: list | None = None

    def __post_init__(self):
        if self.positivity_floor <= 0:
            raise ValueError("positivity floor must be positive")


def observe_elliptic(u1, u2, spec, positivity_floor):
    """Noisy elliptic observation pair (field ids 1 and 2)."""
    return ObservationSet(
        mode="elliptic", delta=spec.delta, positivity_floor=positivity_floor,
        z1=add_noise(u1, spec, field_id=1), z2=add_noise(u2, spec, field_id=2))


def observe_parabolic(traj, windows, spec, positivity_floor):
    """Noisy window observations; sup|u| is taken per time snapshot and the
    noise field id is the global step index, so the realization does not
    depend on which other steps were stored."""
    obs_windows = []
    for T, theta in windows:
        samples = []
        for t, u in traj.window_samples(T, theta):
            m = traj.step_of(t)
            samples.append((t, add_noise(u, spec, field_id=m)))
        if not samples:
            raise ValueError(f"no stored samples in window ({T - theta}, {T}]")
        obs_windows.append(WindowObservation(T, theta, samples))
    return ObservationSet(mode="parabolic", delta=spec.delta,
                          positivity_floor=positivity_floor, windows=obs_windows)


def _same_mesh(a, b):
    if (a.mesh.dim, a.mesh.n) != (b.mesh.dim, b.mesh.n):
        raise ValueError("grid functions live on different meshes")


def ratio_observable(z1, z2, floor):
    """w = z2 / max(z1, floor) - 1, forced to zero on the boundary."""
    _same_mesh(z1, z2)
    if floor <= 0:
        raise ValueError("floor must be positive")
    w = z2.values / np.maximum(z1.values, floor) - 1.0
    w[z1.mesh.boundary_mask] = 0.0
    return GridFunction(z1.mesh, w)


def source_F_elliptic(z1, z2, f1, f2):
    """Effective source F = f2 z1 - f1 z2 of the reformulated problem."""
    _same_mesh(z1, z2)
    return GridFunction(z1.mesh, f2.values * z1.values - f1.values * z2.values)


def difference_observable(z1, z2):
    """zeta = z2 - z1, forced to zero on the boundary."""
    _same_mesh(z1, z2)
    zeta = z2.values - z1.values
    zeta[z1.mesh.boundary_mask] = 0.0
    return GridFunction(z1.mesh, zeta)


_QUOTIENT_WEIGHTS = {1: (1.0, -1.0), 2: (1.5, -2.0, 0.5)}


def backward_diff_quotient(samples, T, tau, k):
    """Backward difference quotient of order k at time T.

    samples is a list of (time, GridFunction) containing T - j*tau for
    j = 0..k exactly; k=1 gives (u(T) - u(T-tau))/tau, k=2 the three-point
    second-order formula.
    """
    if k not in _QUOTIENT_WEIGHTS:
        raise ValueError(f"quotient order k={k} not supported (use 1 or 2)")
    if tau <= 0:
        raise ValueError("tau must be positive")
    by_time = {t: u for t, u in samples}
    times = np.array(sorted(by_time))
    acc = None
    for j, a in enumerate(_QUOTIENT_WEIGHTS[k]):
        want = T - j * tau
        hit = times[np.abs(times - want) <= 1e-9 * max(1.0, abs(T))]
        if len(hit) == 0:
            raise ValueError(f"sample at t={want} (T - {j}*tau) is missing")
        u = by_time[hit[0]]
        acc = a * u.values if acc is None else acc + a * u.values
    return GridFunction(u.mesh, acc / tau)


@dataclass
class DerivedObservables:
    """Everything the two inversion steps consume, on one mesh.

    w_delta and zeta_delta vanish at boundary nodes; F_delta drives the
    q-step state equation and zeta_rhs the sigma-step state equation.
    """

    w_delta: GridFunction
    F_delta: GridFunction
    zeta_delta: GridFunction
    zeta_rhs: GridFunction


def elliptic_observables(obs, f1, f2):
    """Derived observables for the elliptic pair (z1, z2)."""
    floor = obs.positivity_floor
    return DerivedObservables(
        w_delta=ratio_observable(obs.z1, obs.z2, floor),
        F_delta=source_F_elliptic(obs.z1, obs.z2, f1, f2),
        zeta_delta=difference_observable(obs.z1, obs.z2),
        zeta_rhs=GridFunction(f1.mesh, f2.values - f1.values))


def parabolic_effective_sources(obs, f_schedule, tau, k):
    """Derived observables from two time windows of one trajectory.

    Orientation follows the reformulation: w = z(T2)/z(T1) - 1,
    q = D |u(T1)|^2, zeta = z(T2) - z(T1). Difference quotients of order k
    with step tau replace the time derivatives; both windows must contain
    the k+1 required sample times.
    """
    if len(obs.windows) != 2:
        raise ValueError("parabolic observations need exactly two windows")
    win1, win2 = obs.windows
    if k * tau > win1.theta + 1e-12 or k * tau > win2.theta + 1e-12:
        raise ValueError(
            f"window of length {min(win1.theta, win2.theta)} too short for "
            f"order-{k} quotient with tau={tau}")
    def _at_end(win):
        for t, u in win.samples:
            if abs(t - win.T) <= 1e-9 * max(1.0, abs(win.T)):
                return u
        raise ValueError(f"window does not contain its endpoint t={win.T}")

    z1 = _at_end(win1)
    z2 = _at_end(win2)
    dz1 = backward_diff_quotient(win1.samples, win1.T, tau, k)
    dz2 = backward_diff_quotient(win2.samples, win2.T, tau, k)
    f_t1 = f_schedule.at(win1.T)
    f_t2 = f_schedule.at(win2.T)
    mesh = z1.mesh
    f_vals = ((f_t2 - dz2.values) * z1.values
              - (f_t1 - dz1.values) * z2.values)
    rhs = f_t2 - f_t1 + dz1.values - dz2.values
    return DerivedObservables(
        w_delta=ratio_observable(z1, z2, obs.positivity_floor),
        F_delta=GridFunction(mesh, f_vals),
        zeta_delta=difference_observable(z1, z2),
        zeta_rhs=GridFunction(mesh, rhs))
