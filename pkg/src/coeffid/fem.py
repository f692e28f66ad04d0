"""Structured P1 finite elements on the unit interval and unit square.

Meshes are uniform: n subdivisions per axis, 2-D squares split along the
lower-left-to-upper-right diagonal. Coefficients live in the same P1 space
as solutions, and every element integral is evaluated in closed form (the
integrands are polynomials), so assembly carries no quadrature error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .linsolve import SparseSymMatrix, solve_spd_strict


class Mesh:
    """Uniform simplicial triangulation of (0,1) or (0,1)^2.

    Nodes are lexicographically ordered (x fastest, then y), so nodes of a
    nested coarser mesh sit at index-computable positions. Instances are
    immutable; derived quantities (geometry, sparsity pattern, unit
    operators) are cached on first use.
    """

    def __init__(self, dim, n, nodes, elements, boundary_mask):
        self.dim = dim
        self.n = n
        self.nodes = nodes
        self.elements = elements
        self.boundary_mask = boundary_mask
        self.h = 1.0 / n
        self._cache = {}

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def interior_idx(self):
        if "interior" not in self._cache:
            self._cache["interior"] = np.flatnonzero(~self.boundary_mask)
        return self._cache["interior"]

    @property
    def boundary_idx(self):
        if "boundary" not in self._cache:
            self._cache["boundary"] = np.flatnonzero(self.boundary_mask)
        return self._cache["boundary"]

    def geometry(self):
        """(measures (E,), basis gradients (E, d+1, d)) per element."""
        if "geom" not in self._cache:
            p = self.nodes[self.elements]
            if self.dim == 1:
                meas = p[:, 1, 0] - p[:, 0, 0]
                grads = np.empty((len(self.elements), 2, 1))
                grads[:, 0, 0] = -1.0 / meas
                grads[:, 1, 0] = 1.0 / meas
            else:
                d1 = p[:, 1] - p[:, 0]
                d2 = p[:, 2] - p[:, 0]
                det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
                meas = 0.5 * det
                grads = np.empty((len(self.elements), 3, 2))
                for a in range(3):
                    pb, pc = p[:, (a + 1) % 3], p[:, (a + 2) % 3]
                    grads[:, a, 0] = (pb[:, 1] - pc[:, 1]) / det
                    grads[:, a, 1] = (pc[:, 0] - pb[:, 0]) / det
            self._cache["geom"] = (meas, grads)
        return self._cache["geom"]

    def pattern(self):
        """Fixed CSR pattern of the P1 operators plus element scatter map."""
        if "pattern" not in self._cache:
            nv = self.dim + 1
            rows = np.repeat(self.elements, nv, axis=1).ravel()
            cols = np.tile(self.elements, (1, nv)).ravel()
            keys = rows.astype(np.int64) * self.n_nodes + cols
            uniq = np.unique(keys)
            scatter = np.searchsorted(uniq, keys)
            indices = (uniq % self.n_nodes).astype(np.int64)
            urows = uniq // self.n_nodes
            indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
            np.add.at(indptr, urows + 1, 1)
            np.cumsum(indptr, out=indptr)
            self._cache["pattern"] = (indptr, indices, scatter, len(uniq))
        return self._cache["pattern"]

    def interior_plan(self):
        """Positions of interior-by-interior entries in the full data array."""
        if "int_plan" not in self._cache:
            indptr, indices, _, _ = self.pattern()
            rows = np.repeat(np.arange(self.n_nodes), np.diff(indptr))
            keep = ~self.boundary_mask[rows] & ~self.boundary_mask[indices]
            renum = np.cumsum(~self.boundary_mask) - 1
            new_indices = renum[indices[keep]].astype(np.int64)
            counts = np.bincount(renum[rows[keep]], minlength=len(self.interior_idx))
            new_indptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
            self._cache["int_plan"] = (np.flatnonzero(keep), new_indptr, new_indices)
        return self._cache["int_plan"]

    def unit_mass(self):
        if "mass1" not in self._cache:
            ones = GridFunction(self, np.ones(self.n_nodes))
            self._cache["mass1"] = assemble_mass(ones)
        return self._cache["mass1"]

    def unit_stiffness(self):
        if "stiff1" not in self._cache:
            ones = GridFunction(self, np.ones(self.n_nodes))
            self._cache["stiff1"] = assemble_stiffness(ones)
        return self._cache["stiff1"]

    def basis_integrals(self):
        """Vector of integrals of each nodal basis function."""
        if "phi_int" not in self._cache:
            meas, _ = self.geometry()
            nv = self.dim + 1
            contrib = np.repeat(meas / nv, nv)
            self._cache["phi_int"] = np.bincount(
                self.elements.ravel(), weights=contrib, minlength=self.n_nodes)
        return self._cache["phi_int"]

    def __repr__(self):
        return f"Mesh(dim={self.dim}, n={self.n})"


@dataclass(frozen=True)
class GridFunction:
    """Nodal coefficients of a continuous piecewise-linear function."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError(
                f"expected {self.mesh.n_nodes} nodal values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function has non-finite values")

    def copy_with(self, values):
        return GridFunction(self.mesh, values)


@dataclass(frozen=True)
class Box:
    """Closed interval of admissible nodal values."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"empty box: [{self.lower}, {self.upper}]")

    @classmethod
    def diffusion(cls, lower, upper):
        if lower <= 0:
            raise ValueError("diffusion box needs a strictly positive lower bound")
        return cls(lower, upper)

    @classmethod
    def potential(cls, upper):
        return cls(0.0, upper)

    @property
    def midpoint(self):
        return 0.5 * (self.lower + self.upper)


def build_mesh(dim, n):
    """Uniform mesh of the unit interval (dim=1) or unit square (dim=2)."""
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    if dim == 1:
        nodes = (np.arange(n + 1) / n).reshape(-1, 1)
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)]).astype(np.int64)
        boundary = np.zeros(n + 1, dtype=bool)
        boundary[[0, -1]] = True
        return Mesh(1, n, nodes, elements, boundary)

    ij = np.arange(n + 1) / n
    xx, yy = np.meshgrid(ij, ij, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ll = (j * (n + 1) + i).ravel()
    lr, ul, ur = ll + 1, ll + n + 1, ll + n + 2
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.vstack([lower, upper]).astype(np.int64)
    gi, gj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    boundary = ((gi == 0) | (gi == n) | (gj == 0) | (gj == n)).ravel()
    return Mesh(2, n, nodes, elements, boundary)


def interpolate(f, mesh):
    """Lagrange interpolant: nodal samples of f (callable or constant)."""
    if callable(f):
        coords = [mesh.nodes[:, k] for k in range(mesh.dim)]
        vals = np.asarray(f(*coords), dtype=float)
        if vals.shape != (mesh.n_nodes,):
            vals = np.broadcast_to(vals, (mesh.n_nodes,)).astype(float)
        else:
            vals = vals.copy()
    else:
        vals = np.full(mesh.n_nodes, float(f))
    if not np.all(np.isfinite(vals)):
        raise ValueError("interpolation target is non-finite at a node")
    return GridFunction(mesh, vals)


# Exact reference integrals: _ref_tensor(d, k)[a0,...,a_{k-1}] equals the
# integral over one element of the product of k basis functions, divided by
# the element measure. Built from int prod(lambda_i^{a_i}) =
# meas * d! * prod(a_i!) / (sum(a_i) + d)!.
_REF_CACHE = {}


def _ref_tensor(dim, k):
    key = (dim, k)
    if key not in _REF_CACHE:
        nv = dim + 1
        t = np.zeros((nv,) * k)
        for idx in np.ndindex(*t.shape):
            expo = np.bincount(idx, minlength=nv)
            num = math.factorial(dim) * np.prod([math.factorial(e) for e in expo])
            t[idx] = num / math.factorial(int(expo.sum()) + dim)
        _REF_CACHE[key] = t
    return _REF_CACHE[key]


def _scatter(mesh, contrib):
    indptr, indices, scatter, nnz = mesh.pattern()
    data = np.bincount(scatter, weights=contrib.ravel(), minlength=nnz)
    return SparseSymMatrix(mesh.n_nodes, indptr, indices, data)


def assemble_stiffness(q):
    """Operator with entries int q grad(phi_i).grad(phi_j).

    Gradients are constant per element and q is P1, so each element
    contributes its exact average of q times the geometric factor.
    """
    mesh = q.mesh
    meas, grads = mesh.geometry()
    qbar = q.values[mesh.elements].mean(axis=1)
    gg = np.einsum("ead,ebd->eab", grads, grads)
    contrib = (qbar * meas)[:, None, None] * gg
    return _scatter(mesh, contrib)


def assemble_mass(sigma):
    """Operator with entries int sigma phi_i phi_j, integrated exactly."""
    mesh = sigma.mesh
    meas, _ = mesh.geometry()
    t3 = _ref_tensor(mesh.dim, 3)
    sig_el = sigma.values[mesh.elements] * meas[:, None]
    contrib = np.einsum("ec,cab->eab", sig_el, t3)
    return _scatter(mesh, contrib)


def assemble_load_and_lift(f, g, a_full):
    """Right-hand side on interior nodes plus the Dirichlet lifting of g.

    rhs_i = int f phi_i - sum_b A[i,b] g(node_b) over boundary nodes b;
    the lift holds g at boundary nodes and zero inside.
    """
    mesh = f.mesh
    if g.mesh is not mesh and (g.mesh.dim, g.mesh.n) != (mesh.dim, mesh.n):
        raise ValueError("source and boundary data live on different meshes")
    if a_full.n != mesh.n_nodes:
        raise ValueError("operator size does not match the mesh")
    load = mesh.unit_mass().matvec(f.values)
    lift_vals = np.where(mesh.boundary_mask, g.values, 0.0)
    rhs = (load - a_full.matvec(lift_vals))[mesh.interior_idx]
    return rhs, GridFunction(mesh, lift_vals)


def restrict_interior(a, mesh):
    """Submatrix of a over interior nodes (Dirichlet elimination)."""
    keep, indptr, indices = mesh.interior_plan()
    return SparseSymMatrix(len(mesh.interior_idx), indptr, indices, a.data[keep])


def dirichlet_solve(a_full, load_full, g_vals, mesh, tol=1e-10, x0_interior=None):
    """Solve the Dirichlet problem A u = load with u = g on the boundary.

    load_full is the assembled load vector over all nodes; returns the full
    nodal solution and the inner SolveReport. Solver failures propagate.
    """
    lift = np.where(mesh.boundary_mask, g_vals, 0.0)
    rhs = (load_full - a_full.matvec(lift))[mesh.interior_idx]
    a_int = restrict_interior(a_full, mesh)
    x, report = solve_spd_strict(a_int, rhs, tol=tol, x0=x0_interior)
    u = lift
    u[mesh.interior_idx] = x
    return u, report


def norm_l2_on_elements(u, element_mask):
    """Exact L2 norm of a P1 function restricted to the masked elements."""
    mesh = u.mesh
    meas, _ = mesh.geometry()
    t2 = _ref_tensor(mesh.dim, 2)
    ue = u.values[mesh.elements[element_mask]]
    val = np.einsum("ea,eb,ab->e", ue, ue, t2) @ meas[element_mask]
    return float(np.sqrt(max(val, 0.0)))


def measure(kind, u):
    """Exact norm of a P1 grid function: L2, H1semi, H1 or Linf."""
    v = u.values
    if kind == "Linf":
        return float(np.abs(v).max())
    if kind == "L2":
        val = v @ u.mesh.unit_mass().matvec(v)
    elif kind == "H1semi":
        val = v @ u.mesh.unit_stiffness().matvec(v)
    elif kind == "H1":
        val = v @ u.mesh.unit_mass().matvec(v) + v @ u.mesh.unit_stiffness().matvec(v)
    else:
        raise ValueError(f"unknown norm kind: {kind}")
    return float(np.sqrt(max(val, 0.0)))


def _interp_weights(mesh, pts):
    """P1 evaluation stencil on a uniform mesh at arbitrary points.

    Returns (idx, w) with idx (M, d+1) vertex indices and w the barycentric
    weights; exact point location by grid arithmetic, no search.
    """
    n = mesh.n
    if mesh.dim == 1:
        t = pts[:, 0] * n
        tr = np.round(t)
        t = np.where(np.abs(t - tr) < 1e-9, tr, t)
        i = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
        lam = t - i
        idx = np.column_stack([i, i + 1])
        w = np.column_stack([1.0 - lam, lam])
        return idx, w

    t = pts[:, 0] * n
    s = pts[:, 1] * n
    t = np.where(np.abs(t - np.round(t)) < 1e-9, np.round(t), t)
    s = np.where(np.abs(s - np.round(s)) < 1e-9, np.round(s), s)
    i = np.clip(np.floor(t).astype(np.int64), 0, n - 1)
    j = np.clip(np.floor(s).astype(np.int64), 0, n - 1)
    fx = t - i
    fy = s - j
    ll = j * (n + 1) + i
    lr, ul, ur = ll + 1, ll + n + 1, ll + n + 2
    in_lower = fx >= fy
    idx = np.where(in_lower[:, None],
                   np.column_stack([ll, lr, ur]),
                   np.column_stack([ll, ur, ul]))
    w_lower = np.column_stack([1.0 - fx, fx - fy, fy])
    w_upper = np.column_stack([1.0 - fy, fx, fy - fx])
    w = np.where(in_lower[:, None], w_lower, w_upper)
    return idx, w


def evaluate(u, pts):
    """Exact values of a P1 grid function at points inside [0,1]^d."""
    idx, w = _interp_weights(u.mesh, pts)
    return (u.values[idx] * w).sum(axis=1)


def resample(u, target):
    """Nodal evaluation of u at the nodes of another uniform mesh.

    Unlike transfer, no nesting is required: point location on a uniform
    grid is direct, so the evaluation is exact for any pair of meshes.
    """
    if u.mesh.dim != target.dim:
        raise ValueError("resample requires meshes of equal dimension")
    return GridFunction(target, evaluate(u, target.nodes))


def _nested(na, nb):
    big, small = max(na, nb), min(na, nb)
    if big % small:
        return False
    r = big // small
    return r & (r - 1) == 0


def transfer(u, target):
    """Move a grid function between nested meshes by nodal evaluation."""
    if u.mesh.dim != target.dim:
        raise ValueError("transfer requires meshes of equal dimension")
    if not _nested(u.mesh.n, target.n):
        raise ValueError(
            f"meshes n={u.mesh.n} and n={target.n} are not power-of-two nested")
    if target.n == u.mesh.n:
        return GridFunction(target, u.values.copy())
    return resample(u, target)


def project_P_h(f, mesh):
    """L2 projection of a finer nested grid function onto V_h^0 of mesh."""
    src = f.mesh
    if src.dim != mesh.dim:
        raise ValueError("projection requires meshes of equal dimension")
    if src.n < mesh.n or not _nested(src.n, mesh.n):
        raise ValueError(
            f"source n={src.n} is not a nested refinement of target n={mesh.n}")
    y = src.unit_mass().matvec(f.values)
    idx, w = _interp_weights(mesh, src.nodes)
    load = np.bincount(idx.ravel(), weights=(w * y[:, None]).ravel(),
                       minlength=mesh.n_nodes)
    vals = np.zeros(mesh.n_nodes)
    m_int = restrict_interior(mesh.unit_mass(), mesh)
    x, _ = solve_spd_strict(m_int, load[mesh.interior_idx], tol=1e-13)
    vals[mesh.interior_idx] = x
    return GridFunction(mesh, vals)


def clamp_to_box(u, box):
    """Nodal projection onto [box.lower, box.upper]; idempotent."""
    return GridFunction(u.mesh, np.clip(u.values, box.lower, box.upper))


def dump_grid_function(u, basepath, name):
    """Write nodal values as CSV (x[,y],value rows) plus JSON metadata."""
    basepath = str(basepath)
    with open(basepath + ".csv", "w") as fh:
        for row in np.column_stack([u.mesh.nodes, u.values]):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(basepath + ".json", "w") as fh:
        json.dump({"dim": u.mesh.dim, "n": u.mesh.n, "field": name}, fh, indent=1)
        fh.write("\n")


def load_grid_function(basepath):
    """Inverse of dump_grid_function; returns (GridFunction, field name)."""
    basepath = str(basepath)
    with open(basepath + ".json") as fh:
        meta = json.load(fh)
    raw = np.loadtxt(basepath + ".csv", delimiter=",", ndmin=2)
    mesh = build_mesh(meta["dim"], meta["n"])
    if raw.shape[0] != mesh.n_nodes:
        raise ValueError(f"{basepath}.csv: expected {mesh.n_nodes} rows, got {raw.shape[0]}")
    return GridFunction(mesh, raw[:, -1].copy()), meta["field"]
