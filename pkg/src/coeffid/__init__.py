"""coeffid: recover diffusion and potential coefficients of elliptic and
parabolic equations from two noisy internal measurements.

The reconstruction is decoupled: a reformulated single-coefficient problem
yields q = D u1^2 (hence D), then the potential is recovered with the
diffusion frozen. See README.md for the experiment harness.
"""

from .backend import BACKEND
from .fem import Box, GridFunction, Mesh, build_mesh, interpolate
from .linsolve import SolveReport, SolverFailure, SparseSymMatrix, solve_spd

__all__ = [
    "BACKEND",
    "Box",
    "GridFunction",
    "Mesh",
    "SolveReport",
    "SolverFailure",
    "SparseSymMatrix",
    "build_mesh",
    "interpolate",
    "solve_spd",
]

__version__ = "0.1.0"
