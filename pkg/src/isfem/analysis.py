"""Interpolation, reference quadrature, error norms and convergence rates.

Besides the error measures used by the convergence studies this module
holds the single-cell order checks for the basis, the vertex quadrature and
the interpolant, and the mesh-level geometry diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .femcore import (
    AssemblyError,
    BasisRule,
    CellGeometry,
    build_basis,
    cell_geometry,
    flat_cell_normal,
    solve,
)
from .geometry import GeometryError, chart_frame
from .linalg import SolverError, SolverOptions
from .mesh import MeshError, SurfaceMesh, mesh_parameter, refine


# ---------------------------------------------------------------- interpolation


def interpolate_nodal(exact: Callable, mesh: SurfaceMesh) -> np.ndarray:
    """Coefficients of the nodal interpolant: exact values at the vertex positions."""
    return np.asarray(exact(mesh.positions), dtype=float).reshape(mesh.n_vertices)


# ---------------------------------------------------------------- reference quadrature

# barycentric weights of the three edge midpoints
_EDGE_MIDPOINTS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def _lattice_triangles(n: int) -> np.ndarray:
    """Barycentric vertices (m, 3, 3) of the n*n sub-triangles of a uniform split."""
    up, down = [], []
    for i in range(n):
        for j in range(n - i):
            up.append([(i, j), (i + 1, j), (i, j + 1)])
            if i + j <= n - 2:
                down.append([(i + 1, j), (i + 1, j + 1), (i, j + 1)])
    ij = np.array(up + down, dtype=float) / n  # (m, 3, 2): weights of vertices 1 and 2
    return np.concatenate([1.0 - ij.sum(axis=-1, keepdims=True), ij], axis=-1)


REFERENCE_CHUNK_POINTS = 400_000  # quadrature points evaluated at once by the batched helpers


def _chunks(n_items: int, subdivisions: int):
    per = max(1, REFERENCE_CHUNK_POINTS // (3 * 4**subdivisions))
    for start in range(0, n_items, per):
        yield slice(start, min(start + per, n_items))


def reference_integral(chart, triangle, integrand: Callable, subdivisions: int = 5) -> np.ndarray:
    """Integral over the surface patch X(T) of a chart triangle T.

    T is split ``subdivisions`` times into four; every sub-triangle uses the
    edge-midpoint rule on ``integrand(s) * sqrt(det(J^T J))``. ``triangle``
    may be batched, shape (..., 3, 2); ``integrand`` receives chart points
    of shape (..., q, 2) and returns (..., q). The error is O(delta^2) in the
    sub-triangle size delta.
    """
    if subdivisions < 1:
        raise ValueError("subdivisions must be at least 1")
    tri = np.asarray(triangle, dtype=float)
    lam = _lattice_triangles(2**subdivisions)  # (m, 3, 3)
    pts = np.einsum("mkv,...vi->...mki", lam, tri)  # sub-triangle vertices in the chart
    q = np.einsum("ek,...mki->...mei", _EDGE_MIDPOINTS, pts)
    q = q.reshape(q.shape[:-3] + (-1, 2))
    if np.any(~chart.contains(q)):
        raise GeometryError("reference quadrature point outside the chart domain")
    J = chart.jacobian(q)
    weight = np.sqrt(np.linalg.det(np.swapaxes(J, -1, -2) @ J))
    values = np.asarray(integrand(q), dtype=float) * weight
    d1, d2 = tri[..., 1, :] - tri[..., 0, :], tri[..., 2, :] - tri[..., 0, :]
    chart_area = 0.5 * np.abs(d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])
    sub_area = chart_area / lam.shape[0]
    return sub_area / 3.0 * values.sum(axis=-1)


# ---------------------------------------------------------------- error norms


def lumped_norm(values, mesh: SurfaceMesh, area: Optional[np.ndarray] = None) -> float:
    """sqrt(sum_K |K_h|/3 sum_j v(p_j)^2) for nodal values ``values``."""
    v = np.asarray(values, dtype=float)
    if area is None:
        area = cell_area(mesh)
    return float(np.sqrt(np.sum(area / 3.0 * np.sum(v[mesh.cells] ** 2, axis=1))))


def cell_area(mesh: SurfaceMesh) -> np.ndarray:
    p = mesh.cell_positions()
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=-1)


def solution_error(u_h, exact: Callable, mesh: SurfaceMesh) -> float:
    """Lumped vertex norm of u_h - I_h(u)."""
    return lumped_norm(np.asarray(u_h, dtype=float) - interpolate_nodal(exact, mesh), mesh)


def gradient_error(
    u_h,
    exact_gradient: Callable,
    mesh: SurfaceMesh,
    geometry: Optional[CellGeometry] = None,
) -> float:
    """Lumped norm over cells and vertices of |w_h - P_T grad u|_G.

    ``w_h`` is the projected discrete gradient of the cell at each of its
    vertices, ``exact_gradient`` returns the ambient gradient at positions.
    """
    geo = geometry if geometry is not None else cell_geometry(mesh)
    u = np.asarray(u_h, dtype=float)
    w = np.einsum("cqai,ca->cqi", geo.gradients(), u[mesh.cells])
    g = np.asarray(exact_gradient(mesh.cell_positions()), dtype=float)
    exact_w = geo.frames.components(g)
    d = w - exact_w
    sq = geo.frames.g11 * d[..., 0] ** 2 + geo.frames.g22 * d[..., 1] ** 2
    return float(np.sqrt(np.sum(geo.area / 3.0 * sq.sum(axis=1))))


# ---------------------------------------------------------------- rates


def pairwise_eoc(h, err) -> np.ndarray:
    """log(e_i / e_{i+1}) / log(h_i / h_{i+1}); NaN where an error is not positive."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(err, dtype=float)
    out = np.full(max(len(e) - 1, 0), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (e[:-1] > 0) & (e[1:] > 0) & (h[:-1] != h[1:])
        out[ok] = np.log(e[:-1][ok] / e[1:][ok]) / np.log(h[:-1][ok] / h[1:][ok])
    return out


def fitted_slope(h, err, last_k: int) -> float:
    """Least-squares slope of log e against log h over the last ``last_k`` points."""
    h = np.asarray(h, dtype=float)[-last_k:]
    e = np.asarray(err, dtype=float)[-last_k:]
    if last_k < 2 or len(e) < last_k:
        raise ValueError(f"need at least {max(last_k, 2)} points for the fit")
    if np.any(~(e > 0)):
        return math.nan
    x, y = np.log(h), np.log(e)
    x0 = x - x.mean()
    return float(np.dot(x0, y - y.mean()) / np.dot(x0, x0))


@dataclass
class ConvergenceRow:
    level: int
    h: float
    n_nodes: int
    err_sol: float
    err_grad: float
    iterations: int = 0
    norm_sol: float = math.inf  # size of the exact data, sets the noise floor
    norm_grad: float = math.inf


@dataclass
class ConvergenceReport:
    """Per-level errors with pairwise and fitted rates.

    Errors below ``noise * norm`` (solver tolerance level) carry no rate
    information; rates involving them are reported as NaN.
    """

    rows: list = field(default_factory=list)
    last_k: int = 2
    failed: Optional[str] = None  # message of the level that aborted the study
    noise: float = 0.0

    @property
    def h(self) -> np.ndarray:
        return np.array([r.h for r in self.rows])

    def _errors(self, attr: str) -> np.ndarray:
        e = np.array([getattr(r, attr) for r in self.rows], dtype=float)
        norm = np.array([getattr(r, attr.replace("err", "norm")) for r in self.rows], dtype=float)
        floor = np.where(np.isfinite(norm), self.noise * norm, 0.0) if self.noise > 0 else np.zeros_like(e)
        return np.where(e > floor, e, 0.0)

    @property
    def eoc_sol(self) -> np.ndarray:
        return pairwise_eoc(self.h, self._errors("err_sol"))

    @property
    def eoc_grad(self) -> np.ndarray:
        return pairwise_eoc(self.h, self._errors("err_grad"))

    def _fit(self, attr: str) -> float:
        if len(self.rows) < max(self.last_k, 2):
            return math.nan
        return fitted_slope(self.h, self._errors(attr), self.last_k)

    @property
    def fit_sol(self) -> float:
        return self._fit("err_sol")

    @property
    def fit_grad(self) -> float:
        return self._fit("err_grad")

    def to_csv(self) -> str:
        lines = ["level,h,n_nodes,err_sol,err_grad,eoc_sol,eoc_grad"]
        es, eg = self.eoc_sol, self.eoc_grad
        for i, r in enumerate(self.rows):
            a = _fmt(es[i - 1]) if i else ""
            b = _fmt(eg[i - 1]) if i else ""
            lines.append(f"{r.level},{_fmt(r.h)},{r.n_nodes},{_fmt(r.err_sol)},{_fmt(r.err_grad)},{a},{b}")
        if self.failed is not None:
            lines.append(f"# failed: {self.failed}")
        lines.append(f"# fit_sol={_fmt(self.fit_sol)} fit_grad={_fmt(self.fit_grad)} last_k={self.last_k}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else format(float(x), ".10g")


NOISE_FACTOR = 1e3  # errors below NOISE_FACTOR * tolerance * |exact| are solver noise


def convergence_study(
    case,
    levels: int,
    opts: Optional[SolverOptions] = None,
    last_k: Optional[int] = None,
    on_level: Optional[Callable] = None,
    rule: BasisRule = BasisRule.CELL_PLANE,
) -> ConvergenceReport:
    """Solve ``case`` on levels 0..levels-1 and collect errors.

    ``case`` is a :class:`isfem.cases.TestCase`. Each level refines the
    previous mesh unless the case asks for regeneration. A failing level
    stops the study; the report keeps the completed rows and records the
    failure.
    """
    opts = opts or SolverOptions()
    report = ConvergenceReport(
        last_k=case.last_k if last_k is None else last_k,
        noise=NOISE_FACTOR * opts.rel_tolerance,
    )
    mesh = None
    for level in range(levels):
        try:
            mesh = case.mesh_factory(level) if mesh is None or case.regenerate else refine(mesh)
            u_h, result, system = solve(mesh, case.problem, opts, rule)
        except (MeshError, GeometryError, AssemblyError, SolverError) as exc:
            report.failed = f"level {level}: {exc}"
            break
        row = ConvergenceRow(
            level=level,
            h=mesh_parameter(mesh),
            n_nodes=mesh.n_vertices,
            err_sol=solution_error(u_h, case.problem.exact, mesh),
            err_grad=gradient_error(u_h, case.problem.exact_gradient, mesh, system.geometry),
            iterations=result.iterations,
            norm_sol=solution_error(np.zeros(mesh.n_vertices), case.problem.exact, mesh),
            norm_grad=gradient_error(np.zeros(mesh.n_vertices), case.problem.exact_gradient, mesh, system.geometry),
        )
        report.rows.append(row)
        if on_level is not None:
            on_level(row)
        del system, result, u_h
    return report


# ---------------------------------------------------------------- single-cell order checks


def shrink_triangle(triangle, level: int) -> np.ndarray:
    """Chart triangle scaled by 2^-level towards its centroid."""
    tri = np.asarray(triangle, dtype=float)
    c = tri.mean(axis=0)
    return c + (tri - c) * 0.5**level


def _cell_basis(chart, tri, rule: BasisRule) -> np.ndarray:
    p = chart.eval(tri)
    if rule is BasisRule.CELL_PLANE:
        normals = np.repeat(flat_cell_normal(p)[None, :], 3, axis=0)
    else:
        normals = chart_frame(chart, tri).normal
    return build_basis(p, normals)


def _planar_barycentric(tri, s) -> np.ndarray:
    tri = np.asarray(tri, dtype=float)
    T = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=-1)
    l12 = np.linalg.solve(T, np.moveaxis(np.asarray(s) - tri[0], -1, 0).reshape(2, -1))
    l12 = l12.T.reshape(np.shape(s))
    return np.concatenate([1.0 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)


def _plain_integral(tri, integrand, subdivisions):
    """Chart-measure integral (no metric weight) with the same sub-triangle rule."""
    tri = np.asarray(tri, dtype=float)
    lam = _lattice_triangles(2**subdivisions)
    pts = np.einsum("mkv,vi->mki", lam, tri)
    q = np.einsum("ek,mki->mei", _EDGE_MIDPOINTS, pts).reshape(-1, 2)
    d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
    area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
    return area / lam.shape[0] / 3.0 * np.sum(integrand(q), axis=-1), area


def basis_density_errors(chart, triangle, levels: int = 5, subdivisions: int = 4, rule=BasisRule.CELL_PLANE):
    """L2(chart triangle) distance between phi_j = phi~_j o X and the planar P1 basis lambda_j.

    The norm is taken in the plain chart measure over the shrinking chart
    triangle. Returns (h, err) with err of shape (levels, 3); h is the
    longest chord.
    """
    hs, errs = [], []
    for level in range(levels):
        tri = shrink_triangle(triangle, level)
        coef = _cell_basis(chart, tri, rule)

        def sq(s, coef=coef, tri=tri):
            x = chart.eval(s)
            phi = coef[:, 0][:, None] + np.einsum("ji,qi->jq", coef[:, 1:], x)
            lam = _planar_barycentric(tri, s).T
            return (phi - lam) ** 2

        integral, _ = _plain_integral(tri, sq, subdivisions)
        errs.append(np.sqrt(integral))
        hs.append(_chord_h(chart, tri))
    return np.array(hs), np.array(errs)


def _chord_h(chart, tri) -> float:
    p = chart.eval(np.asarray(tri))
    return float(np.max(np.linalg.norm(p[[1, 2, 0]] - p, axis=-1)))


def quadrature_errors(chart, triangle, integrand: Callable, levels: int = 5, subdivisions: int = 5):
    """|trapezoid rule - exact integral| / curved area on a shrinking cell.

    ``integrand`` takes chart points. The trapezoid rule uses the flat area
    of the inscribed triangle and the values at its vertices; the reference
    is the integral over the normal projection of that triangle.
    """
    hs, errs = [], []
    for level in range(levels):
        tri = shrink_triangle(triangle, level)
        p = chart.eval(tri)
        flat = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
        trap = flat / 3.0 * np.sum(integrand(tri))
        ref = lifted_integral(chart, tri, integrand, subdivisions)
        area = lifted_integral(chart, tri, lambda s: np.ones(s.shape[:-1]), subdivisions)
        errs.append(abs(trap - ref) / area)
        hs.append(_chord_h(chart, tri))
    return np.array(hs), np.array(errs)


def interpolation_errors(chart, triangle, field, levels: int = 5, subdivisions: int = 4, rule=BasisRule.CELL_PLANE):
    """RMS interpolation errors of a smooth chart field on a shrinking cell.

    ``field`` is a :class:`isfem.geometry.ChartField`-like object with
    ``value(s)`` and chart gradient ``grad(s)``. The value error compares
    f with I_h f = sum_j f(p_j) phi_j; the gradient error compares grad_G f
    with the tangential projection of the ambient gradient of I_h f, both
    measured in the surface metric. Returns (h, err_value, err_grad).
    """
    hs, ev, eg = [], [], []
    for level in range(levels):
        tri = shrink_triangle(triangle, level)
        coef = _cell_basis(chart, tri, rule)
        fv = field.value(tri)
        a = fv @ coef[:, 0]
        g = fv @ coef[:, 1:]  # ambient gradient of the interpolant

        def sq_value(s):
            return (field.value(s) - (a + chart.eval(s) @ g)) ** 2

        def sq_grad(s):
            J = chart.jacobian(s)
            G = np.swapaxes(J, -1, -2) @ J
            # chart components of the surface gradient: G^{-1} d f  and  G^{-1} J^T g
            df = np.asarray(field.grad(s))
            diff = np.linalg.solve(G, (df - np.einsum("...ki,k->...i", J, g))[..., None])[..., 0]
            return np.einsum("...i,...ij,...j->...", diff, G, diff)

        area = reference_integral(chart, tri, lambda s: np.ones(s.shape[:-1]), subdivisions)
        ev.append(np.sqrt(reference_integral(chart, tri, sq_value, subdivisions) / area))
        eg.append(np.sqrt(reference_integral(chart, tri, sq_grad, subdivisions) / area))
        hs.append(_chord_h(chart, tri))
    return np.array(hs), np.array(ev), np.array(eg)


def interpolation_order_check(chart, triangle, field, levels: int = 5, **kw):
    """Fitted exponents (value, gradient) of :func:`interpolation_errors` over all levels."""
    h, ev, eg = interpolation_errors(chart, triangle, field, levels, **kw)
    return fitted_slope(h, ev, len(h)), fitted_slope(h, eg, len(h))


# ---------------------------------------------------------------- mesh diagnostics


def metric_bounds(mesh: SurfaceMesh):
    """(min, max) of sqrt(det G) over all cell vertices, each in its cell's chart."""
    geo_frames = cell_geometry(mesh).frames
    return float(geo_frames.sqrt_det_g.min()), float(geo_frames.sqrt_det_g.max())


def closest_point(chart, y, s0, iterations: int = 20, tol: float = 1e-14) -> np.ndarray:
    """Chart coordinates of the surface point closest to ambient points ``y``.

    Newton on J(s)^T (X(s) - y) = 0 from the initial guess ``s0``; steps
    that would leave the chart domain are halved.
    """
    s = np.array(s0, dtype=float)
    y = np.asarray(y, dtype=float)
    for _ in range(iterations):
        J = chart.jacobian(s)
        d = chart.eval(s) - y
        r = np.einsum("...ki,...k->...i", J, d)
        M = np.swapaxes(J, -1, -2) @ J + np.einsum("...k,...kij->...ij", d, chart.hessian(s))
        step = np.linalg.solve(M, r[..., None])[..., 0]
        for _ in range(40):
            outside = ~chart.contains(s - step)
            if not np.any(outside):
                break
            step[outside] *= 0.5
        s = s - step
        if np.max(np.abs(step)) < tol:
            break
    return s


def lifted_integral(chart, triangle, integrand: Callable, subdivisions: int = 4) -> np.ndarray:
    """Integral over the normal projection onto the surface of a flat cell.

    The flat cell has vertices X(triangle) (chart triangle, batched as
    (..., 3, 2)). With F the closest-point map from the flat cell to the
    chart, the integral is taken over the flat cell of
    ``integrand(F(y)) * |det(J DF)|`` by the sub-triangle edge-midpoint rule;
    DF follows from differentiating J^T (X(F(y)) - y) = 0.
    """
    if subdivisions < 1:
        raise ValueError("subdivisions must be at least 1")
    tri = np.asarray(triangle, dtype=float)
    p = chart.eval(tri)  # (..., 3, 3)
    lam = _lattice_triangles(2**subdivisions)
    bary = np.einsum("ek,mkv->mev", _EDGE_MIDPOINTS, lam).reshape(-1, 3)  # (q, 3)
    y = np.einsum("qv,...vi->...qi", bary, p)
    s = closest_point(chart, y, np.einsum("qv,...vi->...qi", bary, tri))
    # orthonormal basis (E1, E2) of the flat cell plane
    e1 = p[..., 1, :] - p[..., 0, :]
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    n = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
    flat_area = 0.5 * np.linalg.norm(n, axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    E = np.stack([e1, np.cross(n, e1)], axis=-1)[..., None, :, :]  # (..., 1, 3, 2)
    J = chart.jacobian(s)
    d = chart.eval(s) - y
    M = np.swapaxes(J, -1, -2) @ J + np.einsum("...k,...kij->...ij", d, chart.hessian(s))
    DF = np.linalg.solve(M, np.swapaxes(J, -1, -2) @ E)  # (..., q, 2, 2)
    JD = J @ DF  # tangent images of the flat-plane unit vectors
    element = np.linalg.norm(np.cross(JD[..., 0], JD[..., 1]), axis=-1)
    values = np.asarray(integrand(s), dtype=float) * element
    return flat_area / lam.shape[0] / 3.0 * values.sum(axis=-1)


def lifted_cell_areas(mesh: SurfaceMesh, subdivisions: int = 3) -> np.ndarray:
    """Area of every cell's normal projection onto the surface."""
    s = mesh.cell_coords()
    out = np.empty(mesh.n_cells)
    for cid, chart in enumerate(mesh.atlas):
        idx = np.flatnonzero(mesh.cell_chart == cid)
        for part in _chunks(len(idx), subdivisions):
            cells = idx[part]
            out[cells] = lifted_integral(chart, s[cells], lambda q: np.ones(q.shape[:-1]), subdivisions)
    return out


def area_defect(mesh: SurfaceMesh, subdivisions: int = 3) -> float:
    """max over cells of |curved area - flat area| / flat area.

    The curved cell is the normal projection of the flat cell onto the
    surface (:func:`lifted_cell_areas`).
    """
    flat = cell_area(mesh)
    return float(np.max(np.abs(lifted_cell_areas(mesh, subdivisions) - flat) / flat))


def edge_lengths(mesh: SurfaceMesh, samples: int = 64):
    """Flat chord and curved length of every edge.

    The curved length follows the chart segment between the end points in the
    chart of an adjacent cell, sampled with ``samples`` pieces.
    """
    edges, side_edge = mesh.edges()
    chart_of_edge = np.empty(len(edges), dtype=np.int64)
    chart_of_edge[side_edge.ravel()] = np.repeat(mesh.cell_chart, 3)
    flat = np.linalg.norm(mesh.positions[edges[:, 1]] - mesh.positions[edges[:, 0]], axis=-1)
    curved = np.empty(len(edges))
    t = np.linspace(0.0, 1.0, samples + 1)
    for cid, chart in enumerate(mesh.atlas):
        sel = chart_of_edge == cid
        if not np.any(sel):
            continue
        s0 = mesh.coords[edges[sel, 0], cid]
        s1 = mesh.coords[edges[sel, 1], cid]
        pts = chart.eval(s0[:, None] + t[None, :, None] * (s1 - s0)[:, None])
        curved[sel] = np.linalg.norm(np.diff(pts, axis=1), axis=-1).sum(axis=1)
    return flat, curved


def discrete_l2_ratio(values, mesh: SurfaceMesh, subdivisions: int = 3, rule=BasisRule.CELL_PLANE) -> float:
    """||v_h||^2_{L2(Gamma)} / ||v||_h^2 for nodal values ``values``.

    The numerator integrates (sum_j v_j phi_j)^2 over the curved cells by
    reference quadrature.
    """
    v = np.asarray(values, dtype=float)
    geo = cell_geometry(mesh, rule)
    s = mesh.cell_coords()
    l2 = 0.0
    for cid, chart in enumerate(mesh.atlas):
        sel = np.flatnonzero(mesh.cell_chart == cid)
        if len(sel) == 0:
            continue
        for part in _chunks(len(sel), subdivisions):
            cells = sel[part]
            coef = np.einsum("cja,cj->ca", geo.basis[cells], v[mesh.cells[cells]])

            def sq(q, coef=coef):
                x = chart.eval(q)
                return (coef[:, None, 0] + np.einsum("cqi,ci->cq", x, coef[:, 1:])) ** 2

            l2 += float(np.sum(reference_integral(chart, s[cells], sq, subdivisions)))
    return l2 / lumped_norm(v, mesh, geo.area) ** 2
