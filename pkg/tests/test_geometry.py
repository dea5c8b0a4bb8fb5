import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isfem.geometry import (
    ChartField,
    FlatPlane,
    GeometryError,
    GraphHeight,
    StereographicNorth,
    StereographicSouth,
    ambient_linear_field,
    chart_eval,
    chart_frame,
    full_metric,
    laplace_beltrami,
    make_chart,
    second_form_norm,
    transition,
    transition_north_south,
)

CHARTS = [
    (FlatPlane(), np.array([[0.3, 0.7], [-1.2, 0.4]])),
    (GraphHeight(2.0, 0.0, 5.0), np.array([[1.0, 0.0], [0.6, 0.9], [-1.1, 0.3]])),
    (GraphHeight(2.0, 0.5, 5.0), np.array([[1.05, 0.1], [0.3, 1.2]])),
    (GraphHeight(2.0, 2.0, 5.0), np.array([[1.2, 0.2], [-0.7, 0.95]])),
    (StereographicNorth(), np.array([[0.0, 0.0], [0.3, -0.2], [0.9, 0.4]])),
    (StereographicSouth(), np.array([[0.0, 0.0], [-0.5, 0.6]])),
]


def test_chart_eval_examples():
    assert np.allclose(chart_eval(FlatPlane(), [0.3, 0.7]), [0.3, 0.7, 0.0])
    assert np.allclose(chart_eval(GraphHeight(2, 0, 5), [1.0, 0.0]), [1.0, 0.0, 1.0], atol=1e-15)
    assert np.allclose(chart_eval(StereographicNorth(), [0.0, 0.0]), [0.0, 0.0, 1.0])
    assert np.allclose(chart_eval(StereographicSouth(), [0.0, 0.0]), [0.0, 0.0, -1.0])


def test_graph_domain_violation():
    # a=0: radicand 2 - t vanishes at t = 2
    with pytest.raises(GeometryError):
        chart_eval(GraphHeight(2, 0, 5), [1.5, 0.0])


def test_frame_examples():
    fr = chart_frame(FlatPlane(), [0.2, -3.0])
    assert np.allclose(fr.e1, [1, 0, 0]) and np.allclose(fr.e2, [0, 1, 0])
    assert fr.g11 == 1 and fr.g22 == 1 and np.allclose(fr.normal, [0, 0, 1])

    fr = chart_frame(StereographicNorth(), [0.0, 0.0])
    assert np.isclose(fr.g11, 4) and np.isclose(fr.g22, 4) and np.isclose(fr.sqrt_det_g, 4)

    fr = chart_frame(GraphHeight(2, 0, 5), [1.0, 0.0])
    # dh/dx = -x/h = -1 at (1, 0)
    assert np.allclose(fr.e1, [1, 0, -1]) and np.isclose(fr.g11, 2)
    assert np.allclose(fr.e2, [0, 1, 0]) and np.isclose(fr.g22, 1)
    assert np.isclose(fr.sqrt_det_g, np.sqrt(2))


@pytest.mark.parametrize("chart,s", CHARTS)
def test_frame_invariants(chart, s):
    fr = chart_frame(chart, s)
    n1 = np.linalg.norm(fr.e1, axis=-1)
    n2 = np.linalg.norm(fr.e2, axis=-1)
    assert np.all(np.abs(np.sum(fr.e1 * fr.e2, axis=-1)) <= 1e-12 * n1 * n2)
    assert np.allclose(fr.g11, n1**2, rtol=1e-12)
    assert np.allclose(fr.g22, n2**2, rtol=1e-12)
    assert np.allclose(fr.sqrt_det_g, np.sqrt(fr.g11 * fr.g22), rtol=1e-12)
    cross = np.cross(fr.e1, fr.e2)
    assert np.allclose(fr.normal, cross / np.linalg.norm(cross, axis=-1, keepdims=True), atol=1e-12)
    # the Gram-Schmidt area element equals the coordinate one
    G = full_metric(chart, s).G
    assert np.allclose(fr.sqrt_det_g, np.sqrt(np.linalg.det(G)), rtol=1e-12)


@pytest.mark.parametrize("chart,s", CHARTS)
def test_jacobian_second_order_finite_differences(chart, s):
    J = chart.jacobian(s)

    def fd_error(d):
        cols = []
        for i in range(2):
            e = np.zeros(2)
            e[i] = d
            cols.append((chart.eval(s + e) - chart.eval(s - e)) / (2 * d))
        return np.abs(np.stack(cols, axis=-1) - J).max()

    e1, e2 = fd_error(1e-3), fd_error(5e-4)
    # central differences: halving delta divides the error by about 4
    assert e2 < 1e-6 or 3.0 < e1 / e2 < 5.0


@pytest.mark.parametrize("chart,s", CHARTS)
def test_hessian_matches_jacobian_differences(chart, s):
    H = chart.hessian(s)
    assert np.allclose(H, np.swapaxes(H, -1, -2))
    d = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = d
        fd = (chart.jacobian(s + e) - chart.jacobian(s - e)) / (2 * d)
        assert np.allclose(fd, H[..., :, :, j], rtol=1e-6, atol=1e-6 * (1 + np.abs(H).max()))


def test_full_metric_examples():
    m = full_metric(FlatPlane(), [0.1, 0.2])
    assert np.allclose(m.G, np.eye(2)) and np.allclose(m.dG, 0)
    assert np.allclose(full_metric(StereographicNorth(), [0.0, 0.0]).G, 4 * np.eye(2))
    assert np.allclose(full_metric(GraphHeight(2, 0, 5), [1.0, 0.0]).G, [[2, 0], [0, 1]])


@pytest.mark.parametrize("chart,s", CHARTS)
def test_full_metric_derivative(chart, s):
    m = full_metric(chart, s)
    d = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = d
        fd = (full_metric(chart, s + e).G - full_metric(chart, s - e).G) / (2 * d)
        assert np.allclose(fd, m.dG[..., k, :, :], rtol=1e-6, atol=1e-6 * (1 + np.abs(m.dG).max()))


def _poly_field(c):
    # u = c0 s1 + c1 s2 + c2 s1^2 + c3 s1 s2 + c4 s2^2
    return ChartField(
        value=lambda s: c[0] * s[..., 0] + c[1] * s[..., 1] + c[2] * s[..., 0] ** 2 + c[3] * s[..., 0] * s[..., 1] + c[4] * s[..., 1] ** 2,
        grad=lambda s: np.stack(
            [c[0] + 2 * c[2] * s[..., 0] + c[3] * s[..., 1], c[1] + c[3] * s[..., 0] + 2 * c[4] * s[..., 1]], axis=-1
        ),
        hess=lambda s: np.broadcast_to(np.array([[2 * c[2], c[3]], [c[3], 2 * c[4]]]), s.shape[:-1] + (2, 2)),
    )


def test_laplace_beltrami_flat_examples():
    flat = FlatPlane()
    s = np.array([0.4, -0.3])
    assert np.isclose(laplace_beltrami(flat, _poly_field([1, 0, 0, 0, 0]), s), 0.0)
    assert np.isclose(laplace_beltrami(flat, _poly_field([0, 0, 1, 0, 0]), s), 2.0)


def test_laplace_beltrami_sphere_harmonic():
    # degree-1 spherical harmonics: Lap x = -2 x
    for chart in (StereographicNorth(), StereographicSouth()):
        s = np.array([[0.3, -0.2], [0.8, 0.5], [-1.7, 0.4]])
        for axis in np.eye(3):
            u = ambient_linear_field(chart, axis)
            assert np.allclose(laplace_beltrami(chart, u, s), -2 * u.value(s), atol=1e-12)


def _divergence_form_fd(chart, u, s, d=1e-4):
    """(1/sqrt g) d_i (sqrt g G^ij d_j u) by central differences of the flux."""

    def flux(p):
        G = full_metric(chart, p).G
        return np.sqrt(np.linalg.det(G)) * np.linalg.solve(G, u.grad(p))

    div = 0.0
    for i in range(2):
        e = np.zeros(2)
        e[i] = d
        div += (flux(s + e)[i] - flux(s - e)[i]) / (2 * d)
    return div / np.sqrt(np.linalg.det(full_metric(chart, s).G))


@pytest.mark.parametrize("chart,s", CHARTS)
def test_laplace_beltrami_matches_divergence_form(chart, s):
    u = ambient_linear_field(chart, [0.3, -1.0, 0.7])
    p = s[0]
    exact = laplace_beltrami(chart, u, p)
    e1 = abs(_divergence_form_fd(chart, u, p, 1e-3) - exact)
    e2 = abs(_divergence_form_fd(chart, u, p, 5e-4) - exact)
    scale = 1 + abs(exact)
    assert e2 < 1e-7 * scale or 3.0 < e1 / e2 < 5.0


def test_second_form_norm_examples():
    assert np.isclose(second_form_norm(FlatPlane(), [0.2, 0.1]), 0.0)
    assert np.isclose(second_form_norm(StereographicNorth(), [0.0, 0.0]), 1.0)
    assert np.isclose(second_form_norm(GraphHeight(2, 0, 5), [1.0, 0.0]), 1 / np.sqrt(2))


@given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
@settings(max_examples=60, deadline=None)
def test_sphere_curvature_everywhere(x, y):
    s = np.array([x, y])
    assert np.isclose(second_form_norm(StereographicNorth(), s), 1.0)
    assert np.isclose(second_form_norm(StereographicSouth(), s), 1.0)


@given(st.floats(-1, 1), st.floats(-1, 1))
@settings(max_examples=80, deadline=None)
def test_north_chart_maps_unit_disk_to_sphere(x, y):
    s = np.array([x, y])
    if np.hypot(x, y) > 1:
        s = s / np.hypot(x, y)
    p = chart_eval(StereographicNorth(), s)
    assert abs(np.linalg.norm(p) - 1) <= 1e-12
    assert p[2] >= -1e-15


def test_transition_examples():
    assert np.allclose(transition_north_south([1.0, 0.0]), [1.0, 0.0])
    assert np.allclose(transition_north_south([0.5, 0.0]), [2.0, 0.0])
    s = np.array([0.3, 0.4])
    assert np.allclose(transition_north_south(transition_north_south(s)), s)
    with pytest.raises(GeometryError):
        transition_north_south([0.0, 0.0])


@given(st.floats(0.05, 3.0), st.floats(0, 2 * np.pi))
@settings(max_examples=60, deadline=None)
def test_transition_maps_same_point(rho, th):
    s = rho * np.array([np.cos(th), np.sin(th)])
    north, south = StereographicNorth(), StereographicSouth()
    t = transition(north, south, s)
    assert np.allclose(chart_eval(south, t), chart_eval(north, s), atol=1e-12)


def test_metric_bounds_for_graphs():
    # g11, g22 >= 1 for graphs, so sqrt det g >= 1
    rng = np.random.default_rng(1)
    for a in (0.0, 0.5, 2.0):
        chart = GraphHeight(2, a, 5)
        rho = np.sqrt(rng.uniform(1.0, 1.9, 200))
        th = rng.uniform(0, np.pi, 200)
        s = np.stack([rho * np.cos(th), rho * np.sin(th)], axis=-1)
        assert np.all(chart_frame(chart, s).sqrt_det_g >= 1.0)


def test_make_chart():
    assert make_chart("FlatPlane") == FlatPlane()
    assert make_chart("GraphHeight", 2, 0.5, 5) == GraphHeight(2, 0.5, 5)
    with pytest.raises(ValueError):
        make_chart("Torus")
