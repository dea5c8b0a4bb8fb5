"""Surface triangulations on an atlas of charts.

A vertex may carry coordinates in several charts (atlas interfaces); a cell
lives in exactly one chart and all its vertices have coordinates there.
Chart coordinates are stored densely as ``coords[vertex, chart]`` with NaN
for charts a vertex does not belong to.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO, Union

import numpy as np

from .geometry import (
    Chart,
    FlatPlane,
    GeometryError,
    GraphHeight,
    StereographicNorth,
    StereographicSouth,
    make_chart,
    transition,
)

FORMAT_HEADER = "isfem-mesh 1"


class MeshError(ValueError):
    """Invalid mesh construction or refinement."""


class MeshParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(eq=False)
class SurfaceMesh:
    atlas: tuple
    coords: np.ndarray  # (nv, nchart, 2), NaN where absent
    positions: np.ndarray  # (nv, 3)
    on_boundary: np.ndarray  # (nv,) bool
    cells: np.ndarray  # (nc, 3) int, counter-clockwise in the cell chart
    cell_chart: np.ndarray  # (nc,) int
    level: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def h(self) -> float:
        return mesh_parameter(self)

    def has_chart(self, chart_id: int) -> np.ndarray:
        return ~np.isnan(self.coords[:, chart_id, 0])

    def cell_coords(self) -> np.ndarray:
        """Chart coordinates of the cell vertices in each cell's own chart, (nc, 3, 2)."""
        return self.coords[self.cells, self.cell_chart[:, None], :]

    def cell_positions(self) -> np.ndarray:
        return self.positions[self.cells]

    def edges(self):
        """Unique edges (ne, 2) and the edge index of each cell side (nc, 3).

        Side ``i`` of a cell joins local vertices ``i`` and ``(i + 1) % 3``.
        """
        c = self.cells
        sides = np.stack([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]], axis=1)
        keys = np.sort(sides.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    def boundary_edges(self) -> np.ndarray:
        edges, side_edge = self.edges()
        counts = np.bincount(side_edge.ravel(), minlength=len(edges))
        return edges[counts == 1]

    def __eq__(self, other):
        if not isinstance(other, SurfaceMesh):
            return NotImplemented
        return (
            self.atlas == other.atlas
            and self.level == other.level
            and np.array_equal(self.coords, other.coords, equal_nan=True)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.on_boundary, other.on_boundary)
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.cell_chart, other.cell_chart)
        )


def _signed_area(pts2):
    a, b, c = pts2[..., 0, :], pts2[..., 1, :], pts2[..., 2, :]
    return 0.5 * ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def _orient_ccw(cells, s):
    cells = np.array(cells, dtype=np.int64).reshape(-1, 3)
    flip = _signed_area(s[cells]) < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    return cells


def _stitch(inner, outer, pos, closed):
    """Triangulate the strip between two vertex rows.

    Rows are index lists ordered by angle. Advances greedily along the row
    giving the shorter new diagonal in R^3. For ``closed`` rows the strip
    wraps around.
    """
    tris = []
    if len(inner) == 1:
        c = inner[0]
        n = len(outer)
        for i in range(n if closed else n - 1):
            tris.append((c, outer[i], outer[(i + 1) % n]))
        return tris
    ni, no = len(inner), len(outer)
    if closed:
        inner = list(inner) + [inner[0]]
        outer = list(outer) + [outer[0]]
    i = j = 0
    ei, eo = len(inner) - 1, len(outer) - 1
    while i < ei or j < eo:
        if i == ei:
            adv_inner = False
        elif j == eo:
            adv_inner = True
        else:
            d_inner = np.linalg.norm(pos[inner[i + 1]] - pos[outer[j]])
            d_outer = np.linalg.norm(pos[outer[j + 1]] - pos[inner[i]])
            adv_inner = d_inner <= d_outer
        if adv_inner:
            tris.append((inner[i], inner[i + 1], outer[j]))
            i += 1
        else:
            tris.append((inner[i], outer[j + 1], outer[j]))
            j += 1
    return tris


def _meridian_profile(chart: GraphHeight, rho):
    """Arc length from rho[0] and normal curvature of the radial profile (rho, h(rho))."""
    s = np.stack([rho, np.zeros_like(rho)], axis=-1)
    _, dh, d2h = chart.height_derivatives(s)
    speed = np.sqrt(1.0 + dh[:, 0] ** 2)
    kappa = np.abs(d2h[:, 0, 0]) / speed**3
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(rho))])
    return arc, kappa


TC1_SPACING = 0.18
TC1_OUTER_MARGIN = 0.1
TC1_CURVATURE_RESOLUTION = 0.3
TC1_ALIGN_GAP = 0.5  # minimum ring gap, in units of the tangential spacing, for a change of segment count


def generate_tc1(
    r: float = 2.0,
    a: float = 0.0,
    k: float = 5.0,
    level: int = 0,
    spacing: float = TC1_SPACING,
    outer_margin: float = TC1_OUTER_MARGIN,
    curvature_resolution: float | None = TC1_CURVATURE_RESOLUTION,
) -> SurfaceMesh:
    """Half-annulus {y >= 0, 1 <= x^2 + y^2 <= r - outer_margin} lifted by GraphHeight.

    Concentric rings are spaced by at most ``spacing`` of meridian arc
    length and, with ``curvature_resolution`` set, by at most
    ``curvature_resolution / kappa`` where ``kappa`` is the meridian
    curvature, so that the normal turns by a bounded angle across a cell.
    Ring j carries about pi * rho_j / spacing segments; the count only
    changes across ring gaps of at least ``TC1_ALIGN_GAP * spacing``, so the
    thin cells of curvature-graded bands join vertices at equal angles and
    their radial edges follow the meridian.

    Level l is generated directly with both lengths divided by 2^l rather
    than by midpoint refinement: the rings follow arc length in R^3, which
    keeps cells on the steep outer part as well shaped as at level 0.
    """
    if level < 0:
        raise MeshError("level must be nonnegative")
    chart = GraphHeight(r, a, k)
    rho_in, rho_out = 1.0, math.sqrt(r - outer_margin) if r > outer_margin else 0.0
    if not rho_out > rho_in:
        raise MeshError("empty TC1 parameter annulus")
    scale = 0.5**level
    fine = np.linspace(rho_in, rho_out, 200001)
    probe = np.stack([fine, np.zeros_like(fine)], axis=-1)
    if np.any(~chart.contains(probe)):
        raise MeshError(f"radicand nonpositive on the TC1 domain for r={r}, a={a}, k={k}")
    arc, kappa = _meridian_profile(chart, fine)
    density = np.full_like(fine, 1.0 / (spacing * scale))
    if curvature_resolution is not None:
        density = np.maximum(density, kappa / (curvature_resolution * scale))
    count = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(arc))])
    n_rings = max(1, math.ceil(count[-1] - 1e-9))
    radii = np.interp(np.linspace(0.0, count[-1], n_rings + 1), count, fine)
    radii[0], radii[-1] = rho_in, rho_out

    # segments per ring; the count may only change across a gap of about
    # isotropic size, so rows inside curvature-graded bands stay aligned
    wanted = [max(2, math.ceil(math.pi * rho / (spacing * scale))) for rho in radii]
    gaps = np.diff(np.interp(radii, fine, arc))
    counts = [wanted[0]]
    for j in range(1, len(radii)):
        free = gaps[j - 1] >= TC1_ALIGN_GAP * spacing * scale or j == len(radii) - 1
        counts.append(wanted[j] if free else counts[-1])

    pts, rows = [], []
    for rho, m in zip(radii, counts):
        th = np.linspace(0.0, math.pi, m + 1)
        rows.append(list(range(len(pts), len(pts) + m + 1)))
        pts.extend(zip(rho * np.cos(th), rho * np.sin(th)))
    s = np.array(pts)
    pos = chart.eval(s)
    tris = []
    for j in range(n_rings):
        tris += _stitch(rows[j], rows[j + 1], pos, closed=False)
    cells = _orient_ccw(tris, s)
    bnd = np.zeros(len(s), dtype=bool)
    bnd[rows[0]] = True
    bnd[rows[-1]] = True
    for row in rows:
        bnd[row[0]] = bnd[row[-1]] = True
    return SurfaceMesh(
        atlas=(chart,),
        coords=s[:, None, :].copy(),
        positions=pos,
        on_boundary=bnd,
        cells=cells,
        cell_chart=np.zeros(len(cells), dtype=np.int64),
        level=level,
    )


# chart radii of the rings (the last one is the equator); chosen so that both
# the flat R^3 cells and their chart images have inradius/longest side >= 0.2.
# Stereographic charts are conformal, so refined cells approach the shape of
# their chart images and the bound carries over to every level.
TC2_RADII = (0.22, 0.50, 0.76, 1.0)


def _disk_rows(radii):
    # 6j points on ring j, odd rings offset by half a step
    pts, rows = [(0.0, 0.0)], [[0]]
    for j, rho in enumerate(radii, start=1):
        m = 6 * j
        th = 2 * math.pi * (np.arange(m) + 0.5 * (j % 2)) / m
        start = len(pts)
        pts.extend(zip(rho * np.cos(th), rho * np.sin(th)))
        rows.append(list(range(start, start + m)))
    return np.array(pts), rows


def generate_tc2_sphere(level: int = 0, radii: tuple = TC2_RADII) -> SurfaceMesh:
    """Unit sphere covered by the north and south stereographic charts.

    The same structured disk triangulation is used in both charts; the
    equator ring is shared, its vertices carrying identical coordinates in
    both charts (the transition map is the identity on the unit circle).
    """
    atlas = (StereographicNorth(), StereographicSouth())
    if not radii or radii[-1] != 1.0 or np.any(np.diff((0.0,) + tuple(radii)) <= 0):
        raise MeshError("ring radii must increase and end on the unit circle")
    n_rings = len(radii)
    disk, rows = _disk_rows(radii)
    nd = len(disk)
    eq = np.array(rows[-1])
    interior = np.setdiff1d(np.arange(nd), eq)
    north_pos = atlas[0].eval(disk)
    disk_cells = []
    for j in range(n_rings):
        disk_cells += _stitch(rows[j], rows[j + 1], north_pos, closed=True)
    disk_cells = _orient_ccw(disk_cells, disk)

    # vertex numbering: north disk (all nd), then south interior
    south_map = np.arange(nd)
    south_map[interior] = nd + np.arange(len(interior))
    nv = nd + len(interior)
    coords = np.full((nv, 2, 2), np.nan)
    coords[:nd, 0] = disk
    coords[eq, 1] = disk[eq]
    coords[nd:, 1] = disk[interior]
    positions = np.empty((nv, 3))
    positions[:nd] = north_pos
    positions[nd:] = atlas[1].eval(disk[interior])
    cells = np.vstack([disk_cells, south_map[disk_cells]])
    chart_ids = np.repeat([0, 1], len(disk_cells))
    mesh = SurfaceMesh(
        atlas=atlas,
        coords=coords,
        positions=positions,
        on_boundary=np.zeros(nv, dtype=bool),
        cells=cells,
        cell_chart=chart_ids,
        level=0,
    )
    for _ in range(level):
        mesh = refine(mesh)
    return mesh


def generate_flat(n: int = 4, level: int = 0, length: float = 1.0) -> SurfaceMesh:
    """Square [0, length]^2 in the FlatPlane chart, n x n squares split along diagonals."""
    x = np.linspace(0.0, length, n + 1)
    X, Y = np.meshgrid(x, x, indexing="xy")
    s = np.stack([X.ravel(), Y.ravel()], axis=-1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    cells = np.vstack([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    chart = FlatPlane()
    bnd = (np.isclose(s, 0.0) | np.isclose(s, length)).any(axis=1)
    mesh = SurfaceMesh(
        atlas=(chart,),
        coords=s[:, None, :].copy(),
        positions=chart.eval(s),
        on_boundary=bnd,
        cells=_orient_ccw(cells, s),
        cell_chart=np.zeros(len(cells), dtype=np.int64),
        level=0,
    )
    for _ in range(level):
        mesh = refine(mesh)
    return mesh


def refine(mesh: SurfaceMesh) -> SurfaceMesh:
    """Split every cell into four through edge midpoints taken in chart coordinates.

    Midpoints are lifted to the surface with the chart, so the refined mesh
    stays inscribed. An edge shared by cells of different charts gets its
    midpoint in the lower chart id, mapped to the other chart by the
    transition map; charts that define ``interface_midpoint`` use it there so
    that the point does not depend on which side computed it.
    """
    edges, side_edge = mesh.edges()
    ne, nv, nchart = len(edges), mesh.n_vertices, len(mesh.atlas)
    counts = np.bincount(side_edge.ravel(), minlength=ne)

    # charts of the cells adjacent to each edge
    adj = np.zeros((ne, nchart), dtype=bool)
    adj[side_edge.ravel(), np.repeat(mesh.cell_chart, 3)] = True
    base = np.argmax(adj, axis=1)

    new_coords = np.full((ne, nchart, 2), np.nan)
    new_pos = np.empty((ne, 3))
    for c0 in range(nchart):
        sel = np.flatnonzero(base == c0)
        if len(sel) == 0:
            continue
        chart = mesh.atlas[c0]
        ends = mesh.coords[edges[sel], c0, :]
        mid = 0.5 * (ends[:, 0] + ends[:, 1])
        shared = adj[sel].sum(axis=1) > 1
        if np.any(shared) and hasattr(chart, "interface_midpoint"):
            try:
                mid[shared] = chart.interface_midpoint(ends[shared, 0], ends[shared, 1])
            except GeometryError as exc:
                raise MeshError(str(exc)) from exc
        if np.any(~chart.contains(mid)):
            raise MeshError("edge midpoint falls outside its chart domain")
        new_coords[sel, c0] = mid
        new_pos[sel] = chart.eval(mid)
        for c1 in range(nchart):
            other = sel[adj[sel, c1]]
            if c1 == c0 or len(other) == 0:
                continue
            try:
                mapped = transition(chart, mesh.atlas[c1], new_coords[other, c0])
            except GeometryError as exc:
                raise MeshError(str(exc)) from exc
            if np.any(~mesh.atlas[c1].contains(mapped)):
                raise MeshError("interface midpoint falls outside the neighbouring chart")
            new_coords[other, c1] = mapped

    bnd_new = (counts == 1) & mesh.on_boundary[edges].all(axis=1)
    v = mesh.cells
    m = nv + side_edge  # m[:, 0] = mid(v0,v1), m[:, 1] = mid(v1,v2), m[:, 2] = mid(v2,v0)
    children = np.stack(
        [
            np.stack([v[:, 0], m[:, 0], m[:, 2]], 1),
            np.stack([m[:, 0], v[:, 1], m[:, 1]], 1),
            np.stack([m[:, 2], m[:, 1], v[:, 2]], 1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return SurfaceMesh(
        atlas=mesh.atlas,
        coords=np.concatenate([mesh.coords, new_coords]),
        positions=np.concatenate([mesh.positions, new_pos]),
        on_boundary=np.concatenate([mesh.on_boundary, bnd_new]),
        cells=children,
        cell_chart=np.repeat(mesh.cell_chart, 4),
        level=mesh.level + 1,
    )


def mesh_parameter(mesh: SurfaceMesh) -> float:
    """Longest R^3 chord between two vertices of a cell."""
    p = mesh.cell_positions()
    d = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=-1)
    return float(d.max())


def shape_regularity(mesh: SurfaceMesh) -> float:
    """Minimum over flat cells of inradius / longest side."""
    p = mesh.cell_positions()
    d = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=-1)
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=-1)
    inradius = area / (0.5 * d.sum(axis=1))
    return float((inradius / d.max(axis=1)).min())


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mesh(mesh: SurfaceMesh, sink: Union[str, Path, TextIO]) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            write_mesh(mesh, fh)
        return
    out = [FORMAT_HEADER, f"charts {len(mesh.atlas)}"]
    for cid, chart in enumerate(mesh.atlas):
        out.append(" ".join([str(cid), chart.kind] + [_fmt(p) for p in chart.params()]))
    out.append(f"vertices {mesh.n_vertices}")
    for v in range(mesh.n_vertices):
        present = np.flatnonzero(~np.isnan(mesh.coords[v, :, 0]))
        fields = [str(v), str(int(mesh.on_boundary[v])), str(len(present))]
        for c in present:
            fields += [str(c), _fmt(mesh.coords[v, c, 0]), _fmt(mesh.coords[v, c, 1])]
        fields += [_fmt(x) for x in mesh.positions[v]]
        out.append(" ".join(fields))
    out.append(f"cells {mesh.n_cells}")
    for cell, cid in zip(mesh.cells, mesh.cell_chart):
        out.append(f"{cell[0]} {cell[1]} {cell[2]} {cid}")
    sink.write("\n".join(out) + "\n")


def _section(lines, pos, name):
    if pos >= len(lines):
        raise MeshParseError(f"missing '{name}' section", pos + 1)
    lineno, text = lines[pos]
    parts = text.split()
    if len(parts) != 2 or parts[0] != name:
        raise MeshParseError(f"expected '{name} <n>', got {text!r}", lineno)
    try:
        n = int(parts[1])
    except ValueError:
        raise MeshParseError(f"bad count {parts[1]!r}", lineno) from None
    if n < 0:
        raise MeshParseError(f"negative count {n}", lineno)
    if pos + n >= len(lines):
        raise MeshParseError(f"'{name}' section truncated", lineno)
    return n, pos + 1


def read_mesh(source: Union[str, Path, TextIO]) -> SurfaceMesh:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_mesh(fh)
    lines = [
        (i + 1, raw.split("#", 1)[0].strip())
        for i, raw in enumerate(source.read().splitlines())
    ]
    lines = [(i, t) for i, t in lines if t]
    if not lines:
        raise MeshParseError("missing header")
    if lines[0][1] != FORMAT_HEADER:
        raise MeshParseError(f"missing header, expected {FORMAT_HEADER!r}", lines[0][0])

    n_charts, pos = _section(lines, 1, "charts")
    atlas = []
    for lineno, text in lines[pos : pos + n_charts]:
        parts = text.split()
        try:
            cid = int(parts[0])
            params = [float(p) for p in parts[2:]]
            chart = make_chart(parts[1], *params)
        except (IndexError, ValueError, TypeError) as exc:
            raise MeshParseError(f"bad chart line: {exc}", lineno) from None
        if cid != len(atlas):
            raise MeshParseError(f"chart id {cid} out of order", lineno)
        atlas.append(chart)
    pos += n_charts

    nv, pos = _section(lines, pos, "vertices")
    coords = np.full((nv, n_charts, 2), np.nan)
    positions = np.empty((nv, 3))
    bnd = np.zeros(nv, dtype=bool)
    for expect, (lineno, text) in enumerate(lines[pos : pos + nv]):
        parts = text.split()
        try:
            vid, flag, nc = int(parts[0]), int(parts[1]), int(parts[2])
            if vid != expect:
                raise MeshParseError(f"vertex id {vid} out of order", lineno)
            if flag not in (0, 1):
                raise MeshParseError(f"boundary flag must be 0 or 1, got {flag}", lineno)
            if len(parts) != 3 + 3 * nc + 3:
                raise MeshParseError("wrong number of vertex fields", lineno)
            for q in range(nc):
                cid = int(parts[3 + 3 * q])
                if not 0 <= cid < n_charts:
                    raise MeshParseError(f"unknown chart id {cid}", lineno)
                coords[vid, cid] = float(parts[4 + 3 * q]), float(parts[5 + 3 * q])
            positions[vid] = [float(x) for x in parts[-3:]]
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MeshParseError):
                raise
            raise MeshParseError(f"bad vertex line: {exc}", lineno) from None
        bnd[vid] = bool(flag)
    pos += nv

    ncell, pos = _section(lines, pos, "cells")
    cells = np.empty((ncell, 3), dtype=np.int64)
    chart_ids = np.empty(ncell, dtype=np.int64)
    for c, (lineno, text) in enumerate(lines[pos : pos + ncell]):
        parts = text.split()
        if len(parts) != 4:
            raise MeshParseError("cell line needs 3 vertex ids and a chart id", lineno)
        try:
            ids = [int(p) for p in parts]
        except ValueError as exc:
            raise MeshParseError(f"bad cell line: {exc}", lineno) from None
        for vid in ids[:3]:
            if not 0 <= vid < nv:
                raise MeshParseError(f"vertex index {vid} out of range (mesh has {nv} vertices)", lineno)
        if not 0 <= ids[3] < n_charts:
            raise MeshParseError(f"unknown chart id {ids[3]}", lineno)
        if np.isnan(coords[ids[:3], ids[3], 0]).any():
            raise MeshParseError(f"cell vertices lack coordinates in chart {ids[3]}", lineno)
        cells[c] = ids[:3]
        chart_ids[c] = ids[3]
    pos += ncell
    if pos < len(lines):
        raise MeshParseError("trailing content", lines[pos][0])
    return SurfaceMesh(
        atlas=tuple(atlas),
        coords=coords,
        positions=positions,
        on_boundary=bnd,
        cells=cells,
        cell_chart=chart_ids,
        level=0,
    )


def mesh_to_string(mesh: SurfaceMesh) -> str:
    buf = io.StringIO()
    write_mesh(mesh, buf)
    return buf.getvalue()
