"""Regularized output least squares for the two decoupled steps.

Step one recovers q (then D = q / |z1|^2) from the reformulated diffusion
problem; step two recovers sigma with the diffusion frozen. Both steps run
the same projected nonlinear CG engine: adjoint-state duals, an H1 Riesz
smoothing with natural boundary conditions, Polak-Ribiere directions with
restart, Armijo backtracking, and a nodal clamp onto the admissible box.
The coupled single-functional baseline reuses the engine block-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (Box, GridFunction, _interp_weights, _ref_tensor,
                  assemble_mass, assemble_stiffness, clamp_to_box,
                  restrict_interior)
from .linsolve import solve_spd_strict


class OptimizationStall(RuntimeError):
    """Line search failed before any step was accepted."""


@dataclass
class InverseStepConfig:
    alpha: float
    box: Box
    max_iters: int = 200
    grad_tol: float = 1e-9
    obj_decrease_tol: float = 1e-10
    initial_guess: object = "box-midpoint"
    linesearch: tuple = (1e-4, 0.5, 40)
    solver_tol: float = 1e-10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("regularization weight must be positive")
        if self.grad_tol <= 0 or self.obj_decrease_tol <= 0:
            raise ValueError("tolerances must be positive")

    def start_values(self, mesh):
        if isinstance(self.initial_guess, GridFunction):
            return np.clip(self.initial_guess.values.copy(),
                           self.box.lower, self.box.upper)
        if self.initial_guess == "box-midpoint":
            return np.full(mesh.n_nodes, self.box.midpoint)
        raise ValueError(f"unknown initial guess {self.initial_guess!r}")


@dataclass
class IterationLog:
    """Per accepted iteration: objective split, smoothed gradient norm,
    step length and number of clamp-active nodes."""

    iters: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    misfits: list = field(default_factory=list)
    penalties: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    clamped: list = field(default_factory=list)
    stop_reason: str = ""

    def record(self, it, obj, misfit, penalty, gnorm, step, n_clamped):
        self.iters.append(it)
        self.objectives.append(obj)
        self.misfits.append(misfit)
        self.penalties.append(penalty)
        self.grad_norms.append(gnorm)
        self.steps.append(step)
        self.clamped.append(n_clamped)

    @property
    def accepted_iterations(self):
        return len(self.iters)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,J,misfit,penalty,grad_norm,step,clamped_count\n")
            for row in zip(self.iters, self.objectives, self.misfits,
                           self.penalties, self.grad_norms, self.steps,
                           self.clamped):
                fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                                  for v in row) + "\n")


@dataclass
class ReconstructionResult:
    q_star: GridFunction | None
    D_star: GridFunction | None
    sigma_star: GridFunction | None
    log_q: IterationLog | None
    log_sigma: IterationLog | None
    n_h: int | None = None
    n_H: int | None = None
    e_D: float = float("nan")
    e_sigma: float = float("nan")
    e_sigma_interior: float = float("nan")


def riesz_smooth(dual, mesh, tol=1e-12, x0=None):
    """H1 representative of a dual vector: (grad G, grad phi) + (G, phi) =
    <dual, phi> for every nodal basis function (Neumann is natural, so no
    rows are eliminated). Returns the smoothed gradient as a GridFunction.
    """
    op = mesh._cache.get("riesz_op")
    if op is None:
        op = mesh.unit_stiffness() + mesh.unit_mass()
        mesh._cache["riesz_op"] = op
    g, _ = solve_spd_strict(op, dual, tol=tol, x0=x0)
    return GridFunction(mesh, g)


def _grad_dot_per_element(mesh, w, v):
    """(grad w . grad v) per element; both P1, so the product is constant."""
    _, grads = mesh.geometry()
    gw = np.einsum("ea,ead->ed", w[mesh.elements], grads)
    gv = np.einsum("ea,ead->ed", v[mesh.elements], grads)
    return np.einsum("ed,ed->e", gw, gv)


class _ObservedField:
    """Exact L2 pairings of an observation-mesh field against the basis of
    the working mesh.

    For data living on a (finer) observation mesh this realizes the weak
    coupling of the discrete scheme: load_i = (z, phi_i) integrated on the
    observation mesh, and ||w - z||^2 = w' M w - 2 w . load + const for any
    working-mesh function w. When both meshes coincide it degenerates to
    the plain nodal mass pairing and the misfit is evaluated in error form
    (no cancellation).
    """

    def __init__(self, field, mesh):
        self.mesh = mesh
        src = field.mesh
        self.same_mesh = (src.dim, src.n) == (mesh.dim, mesh.n)
        if self.same_mesh:
            self.nodal = field.values
            self.load = mesh.unit_mass().matvec(field.values)
            self.const = float(field.values @ self.load)
        else:
            y = src.unit_mass().matvec(field.values)
            idx, w = _interp_weights(mesh, src.nodes)
            self.nodal = None
            self.load = np.bincount(idx.ravel(), weights=(w * y[:, None]).ravel(),
                                    minlength=mesh.n_nodes)
            self.const = float(field.values @ y)

    def misfit(self, w, mass1):
        """1/2 ||w - z||^2 over the observation mesh, exact for nested meshes."""
        if self.same_mesh:
            e = w - self.nodal
            return 0.5 * float(e @ mass1.matvec(e))
        val = 0.5 * float(w @ mass1.matvec(w)) - float(w @ self.load) + 0.5 * self.const
        return max(val, 0.0)

    def residual_load(self, w, mass1):
        """(z - w, phi_i) for every working-mesh basis function."""
        return self.load - mass1.matvec(w)


class _DiffusionObjective:
    """J(q) = 1/2 ||w_h(q) - w^delta||^2 + alpha/2 ||grad q||^2 with
    (q grad w_h, grad v) = (F^delta, v) on the interior space; the noisy
    fields are paired exactly against the working-mesh basis."""

    def __init__(self, data, mesh, alpha, solver_tol):
        self.mesh = mesh
        self.alpha = alpha
        self.solver_tol = solver_tol
        self.w_obs = _ObservedField(data.w_delta, mesh)
        self.load_int = _ObservedField(data.F_delta, mesh).load[mesh.interior_idx]
        self.mass1 = mesh.unit_mass()
        self.stiff1 = mesh.unit_stiffness()
        self._x_warm = None

    def state(self, coeff):
        a_int = restrict_interior(assemble_stiffness(GridFunction(self.mesh, coeff)),
                                  self.mesh)
        x, _ = solve_spd_strict(a_int, self.load_int, tol=self.solver_tol,
                                x0=self._x_warm)
        self._x_warm = x
        w = np.zeros(self.mesh.n_nodes)
        w[self.mesh.interior_idx] = x
        return w, a_int

    def value(self, coeff):
        w, a_int = self.state(coeff)
        misfit = self.w_obs.misfit(w, self.mass1)
        penalty = 0.5 * self.alpha * (coeff @ self.stiff1.matvec(coeff))
        return misfit + penalty, (misfit, penalty), (w, a_int)

    def dual(self, coeff, aux):
        w, a_int = aux
        rhs = self.w_obs.residual_load(w, self.mass1)[self.mesh.interior_idx]
        x, _ = solve_spd_strict(a_int, rhs, tol=self.solver_tol)
        v = np.zeros(self.mesh.n_nodes)
        v[self.mesh.interior_idx] = x
        meas, _ = self.mesh.geometry()
        per_el = _grad_dot_per_element(self.mesh, w, v) * meas / (self.mesh.dim + 1)
        nv = self.mesh.dim + 1
        d = np.bincount(self.mesh.elements.ravel(),
                        weights=np.repeat(per_el, nv), minlength=self.mesh.n_nodes)
        return d + self.alpha * self.stiff1.matvec(coeff)


class _PotentialObjective:
    """J(sigma) = 1/2 ||zeta_H(sigma) - zeta^delta||^2 + alpha/2 ||grad sigma||^2
    with (D* grad zeta, grad v) + (sigma zeta, v) = (rhs, v)."""

    def __init__(self, data, mesh, alpha, frozen_D, solver_tol):
        self.mesh = mesh
        self.alpha = alpha
        self.solver_tol = solver_tol
        self.zeta_obs = _ObservedField(data.zeta_delta, mesh)
        self.load_int = _ObservedField(data.zeta_rhs, mesh).load[mesh.interior_idx]
        self.mass1 = mesh.unit_mass()
        self.stiff1 = mesh.unit_stiffness()
        self.k_frozen = assemble_stiffness(frozen_D)
        self._x_warm = None

    def state(self, coeff):
        a = self.k_frozen + assemble_mass(GridFunction(self.mesh, coeff))
        a_int = restrict_interior(a, self.mesh)
        x, _ = solve_spd_strict(a_int, self.load_int, tol=self.solver_tol,
                                x0=self._x_warm)
        self._x_warm = x
        z = np.zeros(self.mesh.n_nodes)
        z[self.mesh.interior_idx] = x
        return z, a_int

    def value(self, coeff):
        z, a_int = self.state(coeff)
        misfit = self.zeta_obs.misfit(z, self.mass1)
        penalty = 0.5 * self.alpha * (coeff @ self.stiff1.matvec(coeff))
        return misfit + penalty, (misfit, penalty), (z, a_int)

    def dual(self, coeff, aux):
        z, a_int = aux
        rhs = self.zeta_obs.residual_load(z, self.mass1)[self.mesh.interior_idx]
        x, _ = solve_spd_strict(a_int, rhs, tol=self.solver_tol)
        v = np.zeros(self.mesh.n_nodes)
        v[self.mesh.interior_idx] = x
        d = _mass_weighted_dual(self.mesh, z, v)
        return d + self.alpha * self.stiff1.matvec(coeff)


def _mass_weighted_dual(mesh, z, v):
    """dual_i = int phi_i z v, exact for P1 factors (cubic per element)."""
    meas, _ = mesh.geometry()
    t3 = _ref_tensor(mesh.dim, 3)
    ze = z[mesh.elements]
    ve = v[mesh.elements]
    per_vertex = np.einsum("cab,ea,eb->ec", t3, ze, ve) * meas[:, None]
    return np.bincount(mesh.elements.ravel(), weights=per_vertex.ravel(),
                       minlength=mesh.n_nodes)


def _make_objective(mode, data, cfg, frozen_D, mesh):
    if mode == "diffusion":
        return _DiffusionObjective(data, mesh, cfg.alpha, cfg.solver_tol)
    if mode == "potential":
        if frozen_D is None:
            raise ValueError("potential mode needs the frozen diffusion D*")
        return _PotentialObjective(data, mesh, cfg.alpha, frozen_D, cfg.solver_tol)
    raise ValueError(f"unknown mode {mode!r}")


def eval_objective(mode, coeff, data, cfg, frozen_D=None):
    """Objective value and forward state at a coefficient; see minimize."""
    obj = _make_objective(mode, data, cfg, frozen_D, coeff.mesh)
    j, _, (state, _) = obj.value(coeff.values)
    return j, GridFunction(coeff.mesh, state)


def gradient(mode, coeff, data, cfg, frozen_D=None):
    """Discrete dual derivative of the objective over nodal values.

    The pairing <J'(c), p> equals dual @ p for nodal perturbations p; the
    penalty contribution is kept in weak form (alpha * K1 c).
    """
    obj = _make_objective(mode, data, cfg, frozen_D, coeff.mesh)
    _, _, aux = obj.value(coeff.values)
    return obj.dual(coeff.values, aux)


def _minimize_engine(obj, cfg, mesh):
    """Projected Polak-Ribiere NCG with Riesz-smoothed directions."""
    armijo_c, shrink, max_backtracks = cfg.linesearch
    box = cfg.box
    x = np.clip(cfg.start_values(mesh), box.lower, box.upper)
    log = IterationLog()

    j, (misfit, penalty), aux = obj.value(x)
    dual = obj.dual(x, aux)
    g = riesz_smooth(dual, mesh).values
    gnorm = float(np.sqrt(max(dual @ g, 0.0)))
    if gnorm <= cfg.grad_tol:
        log.stop_reason = "grad_tol at initial point"
        return GridFunction(mesh, x), log

    d = -g
    step = 1.0 / gnorm
    first_trial_accepted = False
    for it in range(1, cfg.max_iters + 1):
        if dual @ d >= 0.0:
            d = -g  # restart: direction lost descent
        accepted = False
        s = step / shrink if first_trial_accepted else step
        for bt in range(max_backtracks):
            trial = np.clip(x + s * d, box.lower, box.upper)
            dx = trial - x
            pred = dual @ dx
            if pred < 0.0:
                jt, parts_t, aux_t = obj.value(trial)
                if jt <= j + armijo_c * pred:
                    accepted = True
                    first_trial_accepted = bt == 0
                    break
            s *= shrink
        if not accepted:
            if log.accepted_iterations == 0:
                raise OptimizationStall(
                    "no descent step accepted at the initial point")
            log.stop_reason = "line search exhausted"
            break

        n_clamped = int(np.count_nonzero(trial != x + s * d))
        rel_dec = (j - jt) / max(abs(j), 1e-300)
        x, j, (misfit, penalty), aux = trial, jt, parts_t, aux_t
        dual_new = obj.dual(x, aux)
        g_new = riesz_smooth(dual_new, mesh).values
        gnorm = float(np.sqrt(max(dual_new @ g_new, 0.0)))
        log.record(it, j, misfit, penalty, gnorm, s, n_clamped)
        step = s

        if gnorm <= cfg.grad_tol:
            log.stop_reason = "grad_tol"
            break
        if rel_dec <= cfg.obj_decrease_tol:
            log.stop_reason = "objective decrease below tolerance"
            break

        beta = max(0.0, float(dual_new @ (g_new - g)) / float(dual @ g))
        d = -g_new + beta * d
        dual, g = dual_new, g_new
    else:
        log.stop_reason = "max_iters"
    return GridFunction(mesh, x), log


def minimize(mode, data, cfg, frozen_D=None, mesh=None):
    """Run one inversion step; returns (coefficient, IterationLog).

    mode "diffusion" minimizes over q against w^delta; mode "potential"
    minimizes over sigma against zeta^delta with frozen_D in the state
    equation. The working mesh defaults to frozen_D's mesh (potential) or
    the observation mesh; the data may live on a finer observation mesh.
    The final coefficient lies nodally inside cfg.box.
    """
    if mesh is None:
        mesh = frozen_D.mesh if frozen_D is not None else data.w_delta.mesh
    obj = _make_objective(mode, data, cfg, frozen_D, mesh)
    return _minimize_engine(obj, cfg, mesh)


def diffusion_from_q(q_star, z1_delta, floor, box_D):
    """D* = q* / max(z1, floor)^2, clamped into the admissible box."""
    if floor <= 0:
        raise ValueError("floor must be positive")
    denom = np.maximum(z1_delta.values, floor) ** 2
    d = GridFunction(q_star.mesh, q_star.values / denom)
    return clamp_to_box(d, box_D)


@dataclass
class CoupledData:
    """Observations and problem data for the coupled baseline."""

    z1: GridFunction
    z2: GridFunction
    f1: GridFunction
    f2: GridFunction
    g: GridFunction


class _CoupledBlockObjective:
    """One block of the coupled functional J(D, sigma) =
    1/2 sum_i ||u_i - z_i||^2 + alpha1/2 ||grad D||^2 + alpha2/2 ||grad s||^2
    with the non-homogeneous Dirichlet states; 'which' selects the active
    variable, the other is frozen. The reported objective always includes
    both penalty terms so block values are comparable across blocks.
    """

    def __init__(self, data, which, other_vals, alpha_active, alpha_other,
                 solver_tol):
        self.data = data
        self.which = which
        self.other = other_vals
        self.alpha = alpha_active
        self.mesh = data.z1.mesh
        self.mass1 = self.mesh.unit_mass()
        self.stiff1 = self.mesh.unit_stiffness()
        self.other_penalty = 0.5 * alpha_other * (
            other_vals @ self.stiff1.matvec(other_vals))
        self.solver_tol = solver_tol
        self.loads = [self.mass1.matvec(data.f1.values),
                      self.mass1.matvec(data.f2.values)]
        self.lift = np.where(self.mesh.boundary_mask, data.g.values, 0.0)
        self._warm = [None, None]

    def _coeffs(self, x):
        if self.which == "D":
            return x, self.other
        return self.other, x

    def value(self, x):
        mesh = self.mesh
        d_vals, s_vals = self._coeffs(x)
        a = (assemble_stiffness(GridFunction(mesh, d_vals))
             + assemble_mass(GridFunction(mesh, s_vals)))
        a_int = restrict_interior(a, mesh)
        a_lift_int = a.matvec(self.lift)[mesh.interior_idx]
        states = []
        misfit = 0.0
        for i, z in enumerate((self.data.z1, self.data.z2)):
            rhs = self.loads[i][mesh.interior_idx] - a_lift_int
            xi, _ = solve_spd_strict(a_int, rhs, tol=self.solver_tol,
                                     x0=self._warm[i])
            self._warm[i] = xi
            u = self.lift.copy()
            u[mesh.interior_idx] = xi
            states.append(u)
            e = u - z.values
            misfit += 0.5 * (e @ self.mass1.matvec(e))
        penalty = 0.5 * self.alpha * (x @ self.stiff1.matvec(x))
        j = misfit + penalty + self.other_penalty
        return j, (misfit, penalty + self.other_penalty), (states, a_int)

    def dual(self, x, aux):
        states, a_int = aux
        mesh = self.mesh
        d = np.zeros(mesh.n_nodes)
        for u, z in zip(states, (self.data.z1, self.data.z2)):
            rhs = self.mass1.matvec(z.values - u)[mesh.interior_idx]
            vi, _ = solve_spd_strict(a_int, rhs, tol=self.solver_tol)
            v = np.zeros(mesh.n_nodes)
            v[mesh.interior_idx] = vi
            if self.which == "D":
                meas, _ = mesh.geometry()
                per_el = _grad_dot_per_element(mesh, u, v) * meas / (mesh.dim + 1)
                d += np.bincount(mesh.elements.ravel(),
                                 weights=np.repeat(per_el, mesh.dim + 1),
                                 minlength=mesh.n_nodes)
            else:
                d += _mass_weighted_dual(mesh, u, v)
        return d + self.alpha * self.stiff1.matvec(x)


@dataclass
class CoupledBlockRecord:
    outer: int
    which: str
    inner_iterations: int
    objective: float


def coupled_baseline(data, cfg_D, cfg_sigma, outer_iters, total_budget=None):
    """Block-alternating minimization of the coupled least-squares functional.

    Alternates projected-CG blocks over D (sigma frozen) and sigma (D
    frozen); stops after outer_iters sweeps or once the accepted-iteration
    budget is exhausted. Returns (D, sigma, block records, block logs).
    """
    mesh = data.z1.mesh
    d_vals = cfg_D.start_values(mesh)
    s_vals = cfg_sigma.start_values(mesh)
    records = []
    logs = []
    used = 0
    for outer in range(1, outer_iters + 1):
        for which in ("D", "sigma"):
            if total_budget is not None and used >= total_budget:
                break
            cfg = cfg_D if which == "D" else cfg_sigma
            other = s_vals if which == "D" else d_vals
            alpha_other = cfg_sigma.alpha if which == "D" else cfg_D.alpha
            obj = _CoupledBlockObjective(data, which, other,
                                         cfg.alpha, alpha_other, cfg.solver_tol)
            current = d_vals if which == "D" else s_vals
            try:
                coeff, log = _minimize_engine(obj, _with_start(cfg, mesh, current), mesh)
            except OptimizationStall:
                # block already at a (local) minimizer in this direction
                coeff = GridFunction(mesh, (d_vals if which == "D" else s_vals).copy())
                log = IterationLog()
                log.stop_reason = "stalled"
            if which == "D":
                d_vals = coeff.values
            else:
                s_vals = coeff.values
            used += log.accepted_iterations
            j_after, _, _ = obj.value(coeff.values)
            records.append(CoupledBlockRecord(outer, which,
                                              log.accepted_iterations, j_after))
            logs.append(log)
        if total_budget is not None and used >= total_budget:
            break
    return (GridFunction(mesh, d_vals), GridFunction(mesh, s_vals),
            records, logs)


def _with_start(cfg, mesh, start_vals):
    from dataclasses import replace

    return replace(cfg, initial_guess=GridFunction(mesh, start_vals.copy()))


def stability_diagnostics(q_ref, q_test, w_ref, F_ref, beta=2.0):
    """Weighted misfit and positivity margin of the stability estimate.

    weighted_misfit integrates ((q_ref - q_test)/q_ref)^2 *
    (q_ref |grad w|^2 + F w) exactly per element (the nodal ratio is
    treated as P1). positivity_min is the minimum over element barycenters
    of (q |grad w|^2 + F w) / dist(x, boundary)^beta.
    """
    mesh = q_ref.mesh
    meas, _ = mesh.geometry()
    ratio = (q_ref.values - q_test.values) / q_ref.values
    re = ratio[mesh.elements]
    qe = q_ref.values[mesh.elements]
    fe = F_ref.values[mesh.elements]
    we = w_ref.values[mesh.elements]
    gw2 = _grad_dot_per_element(mesh, w_ref.values, w_ref.values)
    t3 = _ref_tensor(mesh.dim, 3)
    t4 = _ref_tensor(mesh.dim, 4)
    term1 = np.einsum("ea,eb,ec,abc->e", re, re, qe, t3) * meas * gw2
    term2 = np.einsum("ea,eb,ec,ed,abcd->e", re, re, fe, we, t4) * meas
    weighted = float((term1 + term2).sum())

    bary = mesh.nodes[mesh.elements].mean(axis=1)
    dist = np.minimum(bary[:, 0], 1.0 - bary[:, 0])
    if mesh.dim == 2:
        dist = np.minimum(dist, np.minimum(bary[:, 1], 1.0 - bary[:, 1]))
    density = qe.mean(axis=1) * gw2 + fe.mean(axis=1) * we.mean(axis=1)
    positivity = float((density / dist ** beta).min())
    return weighted, positivity
