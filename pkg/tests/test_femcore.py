import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isfem.cases import make_case
from isfem.femcore import (
    AssemblyError,
    BasisRule,
    BoundaryCondition,
    ProblemSpec,
    assemble,
    build_basis,
    cell_frames,
    cell_geometry,
    flat_cell_area,
    flat_cell_normal,
    intrinsic_gradient,
    local_lumped_mass,
    local_load,
    local_stiffness,
    needs_deflation,
    solve,
    trapezoid_cell,
)
from isfem.geometry import TangentFrame
from isfem.linalg import SolverOptions, cg_solve
from isfem.mesh import SurfaceMesh, generate_flat, generate_tc1, generate_tc2_sphere
from isfem.geometry import FlatPlane

UNIT = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
Z = np.array([0.0, 0, 1])


def _identity_frames(n_vertices=3):
    return TangentFrame(
        e1=np.tile([1.0, 0, 0], (n_vertices, 1)),
        e2=np.tile([0.0, 1, 0], (n_vertices, 1)),
        normal=np.tile(Z, (n_vertices, 1)),
        g11=np.ones(n_vertices),
        g22=np.ones(n_vertices),
        sqrt_det_g=np.ones(n_vertices),
    )


def _zero_forcing(chart, s):
    return np.zeros(np.shape(s)[:-1])


def _textbook_p1(mesh):
    """Planar P1 stiffness plus trapezoidal load, straight from barycentric gradients."""
    p = mesh.positions[:, :2]
    n = mesh.n_vertices
    K = np.zeros((n, n))
    for cell in mesh.cells:
        T = np.column_stack([p[cell], np.ones(3)])
        grads = np.linalg.inv(T)[:2].T  # row a = gradient of lambda_a
        area = 0.5 * abs(np.linalg.det(T))
        K[np.ix_(cell, cell)] += area * grads @ grads.T
    return K


def test_basis_flat_example():
    B = build_basis(UNIT, np.tile(Z, (3, 1)))
    assert np.allclose(B[0], [1, -1, -1, 0], atol=1e-14)
    assert np.allclose(B[1], [0, 1, 0, 0], atol=1e-14)
    assert np.allclose(B[2], [0, 0, 1, 0], atol=1e-14)


def test_intrinsic_gradient_examples():
    B = build_basis(UNIT, np.tile(Z, (3, 1)))
    fr = _identity_frames(1)
    assert np.allclose(intrinsic_gradient(B, 0, fr), [[-1, -1]])
    # a frame whose normal is parallel to the gradient projects it to zero
    g = B[0, 1:]
    n = g / np.linalg.norm(g)
    e1 = np.cross(n, Z)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    tilted = TangentFrame(e1=e1[None], e2=e2[None], normal=n[None], g11=np.ones(1), g22=np.ones(1), sqrt_det_g=np.ones(1))
    assert np.allclose(intrinsic_gradient(B, 0, tilted), 0, atol=1e-15)


@pytest.mark.parametrize("rule", list(BasisRule))
def test_basis_interpolation_on_tc2(rule):
    mesh = generate_tc2_sphere(1)
    geo = cell_geometry(mesh, rule)
    p = mesh.cell_positions()
    vals = geo.basis[:, :, None, 0] + np.einsum("cjk,cik->cji", geo.basis[:, :, 1:], p)
    assert np.abs(vals - np.eye(3)).max() <= 1e-12


def test_vertex_normal_rule_closure():
    mesh = generate_tc2_sphere(0)
    geo = cell_geometry(mesh, BasisRule.VERTEX_NORMAL)
    n = geo.frames.normal
    grad = geo.basis[:, :, 1:]
    # phi_j(p_j + n_j) = phi_j(p_j), i.e. grad phi_j is tangent at node j
    assert np.abs(np.sum(grad * n, axis=-1)).max() <= 1e-12 * np.abs(grad).max()


def test_cell_plane_rule_reproduces_constants():
    mesh = generate_tc1(2, 0.5, 5, 0)
    geo = cell_geometry(mesh, BasisRule.CELL_PLANE)
    grad_sum = geo.basis[:, :, 1:].sum(axis=1)
    assert np.abs(grad_sum).max() <= 1e-10 * np.abs(geo.basis[:, :, 1:]).max()
    nK = flat_cell_normal(mesh.cell_positions())
    assert np.abs(np.einsum("cjk,ck->cj", geo.basis[:, :, 1:], nK)).max() <= 1e-10 * np.abs(geo.basis).max()


def test_vertex_normal_rule_constant_defect():
    # with vertex normals the gradients of the three nodal functions sum to a
    # normal vector whose size grows with curvature; on a flat cell it vanishes
    flat = cell_geometry(generate_flat(2), BasisRule.VERTEX_NORMAL)
    assert np.abs(flat.basis[:, :, 1:].sum(axis=1)).max() <= 1e-12
    mesh = generate_tc2_sphere(0)
    geo = cell_geometry(mesh, BasisRule.VERTEX_NORMAL)
    s = geo.basis[:, :, 1:].sum(axis=1)
    nK = flat_cell_normal(mesh.cell_positions())
    tangential = s - np.sum(s * nK, axis=-1, keepdims=True) * nK
    assert np.linalg.norm(s, axis=-1).min() > 0.1
    # roughly 2 kappa for the unit sphere
    assert np.allclose(np.linalg.norm(s, axis=-1), 2.0, rtol=0.5)
    assert np.linalg.norm(tangential, axis=-1).max() < 0.1 * np.linalg.norm(s, axis=-1).min()


def test_basis_singular_system():
    with pytest.raises(AssemblyError):
        build_basis(UNIT, np.tile([1.0, 0, 0], (3, 1)))  # normal in the cell plane
    with pytest.raises(AssemblyError):
        build_basis([[0, 0, 0], [1, 0, 0], [2, 0, 0]], np.tile(Z, (3, 1)))


def test_projection_norm_matches_direct_projection():
    mesh = generate_tc1(2, 2.0, 5, 0)
    geo = cell_geometry(mesh)
    fr = geo.frames
    w = geo.gradients()  # (nc, q, a, 2)
    norm_G = np.sqrt(fr.g11[:, :, None] * w[..., 0] ** 2 + fr.g22[:, :, None] * w[..., 1] ** 2)
    g = geo.basis[:, None, :, 1:]
    n = fr.normal[:, :, None, :]
    direct = np.linalg.norm(g - np.sum(g * n, axis=-1, keepdims=True) * n, axis=-1)
    assert np.allclose(norm_G, direct, rtol=1e-12, atol=1e-12 * np.abs(g).max())


def test_flat_cell_area():
    assert flat_cell_area(UNIT) == 0.5
    assert np.isclose(flat_cell_area(2 * UNIT), 2.0)
    with pytest.raises(AssemblyError):
        flat_cell_area([[0, 0, 0], [1, 1, 1], [2, 2, 2]])


def test_trapezoid_cell():
    assert trapezoid_cell(np.ones(3), 0.5) == 0.5
    # affine f = 1 + 2x - y on the unit triangle integrates to 1/2 + 1/3 - 1/6
    f = 1 + 2 * UNIT[:, 0] - UNIT[:, 1]
    assert np.isclose(trapezoid_cell(f, 0.5), 0.5 + 1 / 3 - 1 / 6)


def test_local_stiffness_flat_example():
    B = build_basis(UNIT, np.tile(Z, (3, 1)))
    M = local_stiffness(0.5, _identity_frames(), B)
    assert np.allclose(M, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)
    assert np.allclose(M.sum(axis=1), 0, atol=1e-15)


def test_local_stiffness_rejects_bad_diffusion():
    B = build_basis(UNIT, np.tile(Z, (3, 1)))
    bad = np.tile(np.array([[1.0, 0], [0, -1]]), (3, 1, 1))
    with pytest.raises(AssemblyError):
        local_stiffness(0.5, _identity_frames(), B, bad)
    asym = np.tile(np.array([[1.0, 0.5], [0, 1]]), (3, 1, 1))
    with pytest.raises(AssemblyError):
        local_stiffness(0.5, _identity_frames(), B, asym)


def test_local_stiffness_anisotropic_flat():
    # D = diag(2, 1) in frame components: planar P1 with the weighted gradient product
    B = build_basis(UNIT, np.tile(Z, (3, 1)))
    D = np.tile(np.diag([2.0, 1.0]), (3, 1, 1))
    M = local_stiffness(0.5, _identity_frames(), B, D)
    G = B[:, 1:3]
    assert np.allclose(M, 0.5 * G @ np.diag([2.0, 1.0]) @ G.T, atol=1e-15)


def test_local_mass_and_load():
    assert np.allclose(local_lumped_mass(0.5), [1 / 6] * 3)
    assert np.isclose(local_lumped_mass(0.5).sum(), 0.5)
    assert np.allclose(local_load(0.5, np.ones(3)), [1 / 6] * 3)
    assert np.allclose(local_load(0.5, [1, 0, 0]), [1 / 6, 0, 0])


def test_assemble_two_cells_load_sums_at_shared_vertices():
    mesh = generate_flat(1)
    one = ProblemSpec(forcing=lambda chart, s: np.ones(np.shape(s)[:-1]), bc=BoundaryCondition.NATURAL_NEUMANN)
    b = assemble(mesh, one).b
    shared = np.intersect1d(mesh.cells[0], mesh.cells[1])
    assert np.allclose(b[shared], 2 * (0.5 / 3))
    assert np.isclose(b.sum(), 1.0)


def test_assemble_dirichlet_zero_two_cells():
    mesh = generate_flat(1)
    sys = assemble(mesh, ProblemSpec(forcing=lambda chart, s: np.ones(np.shape(s)[:-1]), bc=BoundaryCondition.DIRICHLET_ZERO))
    assert np.array_equal(sys.A.to_dense(), np.eye(4))
    assert np.array_equal(sys.b, np.zeros(4))
    assert np.array_equal(cg_solve(sys.A, sys.b).x, np.zeros(4))


def test_dirichlet_exact_needs_exact():
    with pytest.raises(AssemblyError):
        assemble(generate_flat(2), ProblemSpec(forcing=_zero_forcing, bc=BoundaryCondition.DIRICHLET_EXACT))


def test_lumped_mass_diagonal_sums_to_flat_area():
    mesh = generate_tc2_sphere(1)
    stiff = assemble(mesh, ProblemSpec(forcing=_zero_forcing)).A.to_dense()
    full = assemble(mesh, ProblemSpec(forcing=_zero_forcing, reaction=1.0)).A.to_dense()
    mass = full - stiff
    assert np.allclose(mass, np.diag(np.diag(mass)), atol=1e-14)
    assert np.isclose(np.trace(mass), flat_cell_area(mesh.cell_positions()).sum(), rtol=1e-13)


@pytest.mark.parametrize("mesh", [generate_tc2_sphere(1), generate_tc1(2, 0.5, 5, 0)], ids=["tc2", "tc1"])
def test_stiffness_symmetric_psd(mesh):
    geo = cell_geometry(mesh)
    K = local_stiffness(geo.area, geo.frames, geo.basis)
    assert np.abs(K - np.swapaxes(K, 1, 2)).max() <= 1e-13
    A = assemble(mesh, ProblemSpec(forcing=_zero_forcing)).A.to_dense()
    assert np.abs(A - A.T).max() <= 1e-12 * np.abs(A).max()
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal(mesh.n_vertices)
        assert x @ A @ x >= -1e-10 * (x @ x)


def test_closed_pure_stiffness_kills_constants():
    mesh = generate_tc2_sphere(2)
    A = assemble(mesh, ProblemSpec(forcing=_zero_forcing)).A
    assert np.abs(A @ np.ones(mesh.n_vertices)).max() <= 1e-10


def test_tc2_reaction_makes_spd():
    mesh = generate_tc2_sphere(0)
    sys = assemble(mesh, make_case("tc2").problem)
    A = sys.A.to_dense()
    assert np.linalg.eigvalsh(A).min() > 0
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal(mesh.n_vertices)
        assert x @ A @ x > 0
    r = cg_solve(sys.A, rng.standard_normal(mesh.n_vertices), SolverOptions(1e-10))
    assert r.residual <= 1e-10 * np.linalg.norm(r.history[0]) * 10


def test_flat_limit_matches_textbook():
    for n, level in ((3, 0), (4, 1)):
        mesh = generate_flat(n, level)
        A = assemble(mesh, ProblemSpec(forcing=_zero_forcing, bc=BoundaryCondition.NATURAL_NEUMANN)).A.to_dense()
        assert np.abs(A - _textbook_p1(mesh)).max() <= 1e-12


def test_flat_limit_irregular_mesh():
    rng = np.random.default_rng(4)
    mesh = generate_flat(5)
    s = mesh.coords[:, 0].copy()
    inner = ~mesh.on_boundary
    s[inner] += rng.uniform(-0.05, 0.05, (inner.sum(), 2))
    mesh = SurfaceMesh(mesh.atlas, s[:, None], FlatPlane().eval(s), mesh.on_boundary, mesh.cells, mesh.cell_chart)
    A = assemble(mesh, ProblemSpec(forcing=_zero_forcing, bc=BoundaryCondition.NATURAL_NEUMANN)).A.to_dense()
    assert np.abs(A - _textbook_p1(mesh)).max() <= 1e-12


@given(st.floats(0, 2 * np.pi), st.floats(0, np.pi), st.floats(0, 2 * np.pi))
@settings(max_examples=25, deadline=None)
def test_rotation_invariance(alpha, beta, gamma):
    def rot(axis, t):
        c, s = np.cos(t), np.sin(t)
        i, j = [k for k in range(3) if k != axis]
        R = np.eye(3)
        R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
        return R

    R = rot(2, alpha) @ rot(0, beta) @ rot(2, gamma)
    mesh = generate_flat(3)
    p = mesh.cell_positions()
    fr = cell_frames(mesh)
    area = flat_cell_area(p)
    K0 = local_stiffness(area, fr, build_basis(p, fr.normal))
    pr = p @ R.T
    frr = TangentFrame(
        e1=fr.e1 @ R.T, e2=fr.e2 @ R.T, normal=fr.normal @ R.T, g11=fr.g11, g22=fr.g22, sqrt_det_g=fr.sqrt_det_g
    )
    K1 = local_stiffness(flat_cell_area(pr), frr, build_basis(pr, frr.normal))
    assert np.abs(K1 - K0).max() <= 1e-12


def test_flat_solution_reproduces_linear():
    case = make_case("flat")
    mesh = case.mesh_factory(1)
    x, result, _ = solve(mesh, case.problem, SolverOptions(1e-12))
    assert np.abs(x - mesh.positions[:, 0]).max() <= 1e-10


def test_needs_deflation():
    assert needs_deflation(ProblemSpec(forcing=_zero_forcing))
    assert not needs_deflation(ProblemSpec(forcing=_zero_forcing, reaction=1.0))
    assert not needs_deflation(ProblemSpec(forcing=_zero_forcing, bc=BoundaryCondition.DIRICHLET_ZERO))


def test_solve_closed_pure_stiffness_is_mean_free():
    case = make_case("tc2")
    problem = ProblemSpec(forcing=case.problem.forcing, bc=BoundaryCondition.CLOSED)
    x, result, _ = solve(generate_tc2_sphere(1), problem)
    assert abs(x.mean()) <= 1e-10
