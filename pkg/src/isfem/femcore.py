"""Intrinsic P1 basis, projected gradients, vertex quadrature and assembly.

Each cell carries three affine functions of R^3,
``phi_j(x) = a + (b, c, d) . x``, with ``phi_j(p_i) = delta_ij`` plus one
condition at ``q = p_j + n(p_j)``. Two rules for that value are provided:

* ``BasisRule.CELL_PLANE`` (default): ``phi_j(q) = lambda_j(q)``, the flat
  barycentric coordinate extended constantly along the cell normal. The
  gradients lie in the plane of the flat cell and sum to zero, so constants
  are reproduced exactly.
* ``BasisRule.VERTEX_NORMAL``: ``phi_j(q) = 1``, i.e. the gradient is
  tangent at its own node. The gradients then sum to a multiple of the cell
  normal whose projection is O(kappa^2 h), which spoils consistency on
  strongly curved surfaces.

Gradients are only ever used after projection onto the tangent plane at a
cell vertex, expressed in the Gram-Schmidt frame of the cell's chart.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import TangentFrame, chart_frame
from .linalg import SolverOptions, SparseMatrixCSR, cg_solve
from .mesh import SurfaceMesh

AREA_TOL = 1e-300


class AssemblyError(ValueError):
    pass


class BasisRule(enum.Enum):
    CELL_PLANE = "cell-plane"
    VERTEX_NORMAL = "vertex-normal"


class BoundaryCondition(enum.Enum):
    DIRICHLET_EXACT = "DirichletExact"
    DIRICHLET_ZERO = "DirichletZero"
    NATURAL_NEUMANN = "NaturalNeumann"
    CLOSED = "Closed"


@dataclass
class ProblemSpec:
    """Data of -div_G(D grad_G u) + c u = f.

    ``forcing(chart, s)`` and ``diffusion(chart, s)`` are evaluated at chart
    coordinates; ``diffusion`` returns 2x2 matrices in orthonormal tangent
    frame components (None means the identity). ``exact`` and
    ``exact_gradient`` take ambient positions.
    """

    forcing: Callable
    bc: BoundaryCondition = BoundaryCondition.CLOSED
    reaction: float = 0.0
    diffusion: Optional[Callable] = None
    exact: Optional[Callable] = None
    exact_gradient: Optional[Callable] = None


def build_basis(positions, normals) -> np.ndarray:
    """Affine nodal functions of a batch of cells.

    ``positions`` and ``normals`` have shape (..., 3, 3) (vertex, xyz); the
    fourth condition is ``phi_j(p_j + normals[j]) = 1``, which makes
    ``(b, c, d)`` orthogonal to ``normals[j]``. Passing the flat cell normal
    for all three vertices gives the cell-plane rule.
    Returns coefficients of shape (..., 3, 4): ``[a, b, c, d]`` for node j.
    """
    p = np.asarray(positions, dtype=float)
    n = np.asarray(normals, dtype=float)
    batch = p.shape[:-2]
    M = np.ones(batch + (3, 4, 4))
    M[..., :, :3, 1:] = p[..., None, :, :]
    M[..., :, 3, 1:] = p + n
    rhs = np.zeros(batch + (3, 4))
    rhs[..., :, :3] = np.eye(3)
    rhs[..., :, 3] = 1.0
    # scale-aware singularity check: the 3x3 block of differences carries the geometry
    d = np.stack([p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :]], axis=-2)
    det = np.linalg.det(M)
    scale = np.linalg.norm(d[..., 0, :], axis=-1) * np.linalg.norm(d[..., 1, :], axis=-1)
    bad = ~(np.abs(det) > 1e-12 * scale[..., None])
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise AssemblyError(f"singular basis system at cell {tuple(idx[:-1])}, node {idx[-1]}")
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def intrinsic_gradient(basis, j, frame: TangentFrame) -> np.ndarray:
    """Contravariant frame components of the tangential part of grad phi_j."""
    basis = np.asarray(basis)
    return frame.components(basis[..., j, 1:])


def flat_cell_area(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    area = 0.5 * np.linalg.norm(np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :]), axis=-1)
    scale = np.max(np.linalg.norm(p[..., [1, 2, 0], :] - p, axis=-1), axis=-1)
    bad = ~(area > 1e-14 * scale**2) | ~(area > AREA_TOL)
    if np.any(bad):
        raise AssemblyError(f"degenerate cell {tuple(np.argwhere(bad)[0])}")
    return area


def trapezoid_cell(values, area):
    return np.asarray(area) / 3.0 * np.sum(values, axis=-1)


@dataclass(frozen=True)
class CellGeometry:
    """Per-cell data shared by assembly and error evaluation.

    ``frames`` fields are batched as (nc, 3, ...) over cells and local vertices.
    """

    area: np.ndarray  # (nc,)
    frames: TangentFrame
    basis: np.ndarray  # (nc, 3, 4)

    def gradients(self) -> np.ndarray:
        """Projected basis gradients, (..., quad vertex q, basis a, 2)."""
        g = self.basis[..., None, :, 1:]
        e1 = self.frames.e1[..., :, None, :]
        e2 = self.frames.e2[..., :, None, :]
        w1 = np.sum(e1 * g, axis=-1) / self.frames.g11[..., :, None]
        w2 = np.sum(e2 * g, axis=-1) / self.frames.g22[..., :, None]
        return np.stack([w1, w2], axis=-1)

    def orthonormal_gradients(self) -> np.ndarray:
        w = self.gradients()
        scale = np.stack([np.sqrt(self.frames.g11), np.sqrt(self.frames.g22)], axis=-1)
        return w * scale[..., :, None, :]


def cell_frames(mesh: SurfaceMesh) -> TangentFrame:
    """Tangent frames at every cell vertex, computed in the cell's chart."""
    s = mesh.cell_coords()
    nc = mesh.n_cells
    out = {k: np.empty((nc, 3, 3)) for k in ("e1", "e2", "normal")}
    out.update({k: np.empty((nc, 3)) for k in ("g11", "g22", "sqrt_det_g")})
    for cid, chart in enumerate(mesh.atlas):
        sel = mesh.cell_chart == cid
        if not np.any(sel):
            continue
        fr = chart_frame(chart, s[sel])
        for k in out:
            out[k][sel] = getattr(fr, k)
    return TangentFrame(**out)


def flat_cell_normal(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=float)
    n = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def cell_geometry(mesh: SurfaceMesh, rule: BasisRule = BasisRule.CELL_PLANE) -> CellGeometry:
    p = mesh.cell_positions()
    area = flat_cell_area(p)
    frames = cell_frames(mesh)
    if rule is BasisRule.CELL_PLANE:
        normals = np.repeat(flat_cell_normal(p)[:, None, :], 3, axis=1)
    else:
        normals = frames.normal
    return CellGeometry(area=area, frames=frames, basis=build_basis(p, normals))


def _check_spd(D):
    sym = np.allclose(D, np.swapaxes(D, -1, -2), rtol=1e-12, atol=1e-14)
    eig = np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, -1, -2)))
    bad = ~(eig.min(axis=-1) > 0)
    if not sym or np.any(bad):
        where = tuple(np.argwhere(bad)[0]) if np.any(bad) else "?"
        raise AssemblyError(f"diffusion tensor not symmetric positive definite at {where}")


def local_stiffness(area, frames: TangentFrame, basis, diffusion=None) -> np.ndarray:
    """Element matrices (|K_h|/3) sum_q <D(q) grad phi_a(q), grad phi_b(q)>_G.

    ``diffusion`` is None or an array (..., 3, 2, 2) of tensors at the
    three vertices in orthonormal frame components.
    """
    geo = CellGeometry(area=np.asarray(area), frames=frames, basis=np.asarray(basis))
    w = geo.orthonormal_gradients()
    if diffusion is None:
        integrand = np.einsum("...qai,...qbi->...ab", w, w)
    else:
        D = np.asarray(diffusion, dtype=float)
        _check_spd(D)
        integrand = np.einsum("...qij,...qaj,...qbi->...ab", D, w, w)
    return geo.area[..., None, None] / 3.0 * integrand


def local_lumped_mass(area) -> np.ndarray:
    area = np.asarray(area, dtype=float)
    return np.repeat(area[..., None] / 3.0, 3, axis=-1)


def local_load(area, forcing_values) -> np.ndarray:
    return np.asarray(area)[..., None] / 3.0 * np.asarray(forcing_values, dtype=float)


def vertex_chart_values(mesh: SurfaceMesh, fn: Callable) -> np.ndarray:
    """Evaluate ``fn(chart, s)`` once per vertex, in the lowest chart the vertex belongs to."""
    first = np.argmax(~np.isnan(mesh.coords[:, :, 0]), axis=1)
    out = None
    for cid, chart in enumerate(mesh.atlas):
        sel = first == cid
        if not np.any(sel):
            continue
        vals = np.asarray(fn(chart, mesh.coords[sel, cid]), dtype=float)
        if out is None:
            out = np.empty((mesh.n_vertices,) + vals.shape[1:])
        out[sel] = vals
    return out


def cell_chart_values(mesh: SurfaceMesh, fn: Callable) -> np.ndarray:
    """Evaluate ``fn(chart, s)`` at every cell vertex in the cell's own chart, (nc, 3, ...)."""
    s = mesh.cell_coords()
    out = None
    for cid, chart in enumerate(mesh.atlas):
        sel = mesh.cell_chart == cid
        if not np.any(sel):
            continue
        vals = np.asarray(fn(chart, s[sel]), dtype=float)
        if out is None:
            out = np.empty((mesh.n_cells,) + vals.shape[1:])
        out[sel] = vals
    return out


@dataclass
class AssembledSystem:
    A: SparseMatrixCSR
    b: np.ndarray
    geometry: CellGeometry
    dirichlet: np.ndarray  # (nv,) bool mask of eliminated vertices
    dirichlet_values: np.ndarray


def assemble(mesh: SurfaceMesh, problem: ProblemSpec, geometry: CellGeometry | None = None) -> AssembledSystem:
    """Global stiffness + reaction * lumped mass, and the load vector.

    Dirichlet conditions are imposed by symmetric elimination: boundary rows
    and columns become identity rows, known values move to the right-hand side.
    """
    geo = geometry if geometry is not None else cell_geometry(mesh)
    D = None if problem.diffusion is None else cell_chart_values(mesh, problem.diffusion)
    try:
        K = local_stiffness(geo.area, geo.frames, geo.basis, D)
    except AssemblyError as exc:
        raise AssemblyError(f"cell {exc}") from exc
    nv = mesh.n_vertices
    cells = mesh.cells
    mass = local_lumped_mass(geo.area)
    if problem.reaction:
        K = K + problem.reaction * np.einsum("ca,ab->cab", mass, np.eye(3))
    f = vertex_chart_values(mesh, problem.forcing)
    load = local_load(geo.area, f[cells])
    b = np.bincount(cells.ravel(), weights=load.ravel(), minlength=nv)

    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    vals = K.ravel()

    dirichlet = np.zeros(nv, dtype=bool)
    g = np.zeros(nv)
    if problem.bc in (BoundaryCondition.DIRICHLET_EXACT, BoundaryCondition.DIRICHLET_ZERO):
        dirichlet = mesh.on_boundary.copy()
        if problem.bc is BoundaryCondition.DIRICHLET_EXACT:
            if problem.exact is None:
                raise AssemblyError("DirichletExact needs an exact solution")
            g[dirichlet] = problem.exact(mesh.positions[dirichlet])
        # move known columns to the rhs, then drop boundary rows and columns
        fixed_col = dirichlet[cols]
        b -= np.bincount(rows[fixed_col], weights=vals[fixed_col] * g[cols[fixed_col]], minlength=nv)
        keep = ~(dirichlet[rows] | dirichlet[cols])
        idx = np.flatnonzero(dirichlet)
        rows = np.concatenate([rows[keep], idx])
        cols = np.concatenate([cols[keep], idx])
        vals = np.concatenate([vals[keep], np.ones(len(idx))])
        b[dirichlet] = g[dirichlet]
    A = SparseMatrixCSR.from_coo(rows, cols, vals, nv)
    return AssembledSystem(A=A, b=b, geometry=geo, dirichlet=dirichlet, dirichlet_values=g)


def needs_deflation(problem: ProblemSpec) -> bool:
    """Pure stiffness on a closed surface or with natural conditions is singular (constants)."""
    natural = problem.bc in (BoundaryCondition.CLOSED, BoundaryCondition.NATURAL_NEUMANN)
    return natural and problem.reaction == 0.0


def solve(
    mesh: SurfaceMesh,
    problem: ProblemSpec,
    opts: SolverOptions | None = None,
    rule: BasisRule = BasisRule.CELL_PLANE,
):
    """Assemble and solve; returns (nodal values, CGResult, AssembledSystem).

    Constant deflation is switched on automatically when the operator has
    the constants in its kernel.
    """
    opts = opts or SolverOptions()
    if needs_deflation(problem) and not opts.deflate_constants:
        opts = dataclasses.replace(opts, deflate_constants=True)
    system = assemble(mesh, problem, cell_geometry(mesh, rule))
    result = cg_solve(system.A, system.b, opts)
    return result.x, result, system
