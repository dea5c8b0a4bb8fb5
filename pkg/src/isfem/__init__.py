"""Intrinsic surface finite elements for elliptic problems on surfaces in R^3."""

from .analysis import (
    ConvergenceReport,
    convergence_study,
    gradient_error,
    interpolate_nodal,
    reference_integral,
    solution_error,
)
from .cases import make_case
from .femcore import BasisRule, BoundaryCondition, ProblemSpec, assemble, build_basis, solve
from .geometry import (
    FlatPlane,
    GraphHeight,
    StereographicNorth,
    StereographicSouth,
    chart_eval,
    chart_frame,
    laplace_beltrami,
)
from .linalg import SolverOptions, SparseMatrixCSR, cg_solve
from .mesh import SurfaceMesh, generate_flat, generate_tc1, generate_tc2_sphere, read_mesh, refine, write_mesh

__version__ = "0.1.0"

__all__ = [
    "BasisRule",
    "BoundaryCondition",
    "ConvergenceReport",
    "FlatPlane",
    "GraphHeight",
    "ProblemSpec",
    "SolverOptions",
    "SparseMatrixCSR",
    "StereographicNorth",
    "StereographicSouth",
    "SurfaceMesh",
    "assemble",
    "build_basis",
    "cg_solve",
    "chart_eval",
    "chart_frame",
    "convergence_study",
    "generate_flat",
    "generate_tc1",
    "generate_tc2_sphere",
    "gradient_error",
    "interpolate_nodal",
    "laplace_beltrami",
    "make_case",
    "read_mesh",
    "reference_integral",
    "refine",
    "solution_error",
    "solve",
    "write_mesh",
]
