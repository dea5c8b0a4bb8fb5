"""Charts, tangent frames and metric quantities of embedded surfaces.

Every chart maps parameter points ``s = (s1, s2)`` to points of R^3 and
supplies closed-form first and second derivatives. All routines accept a
single point of shape ``(2,)`` or a batch of shape ``(..., 2)``.

Array conventions:

* ``jacobian(s)[..., :, i]`` is dX/ds_i (shape ``(..., 3, 2)``)
* ``hessian(s)[..., :, i, j]`` is d2X/ds_i ds_j (shape ``(..., 3, 2, 2)``)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

DEGENERATE_TOL = 1e-14


class GeometryError(ValueError):
    """Raised for points outside a chart domain or degenerate frames."""


@dataclass(frozen=True)
class FlatPlane:
    """Identity embedding of the parameter plane as z = 0."""

    kind = "FlatPlane"

    def params(self):
        return ()

    def contains(self, s):
        return np.ones(np.shape(s)[:-1], dtype=bool)

    def eval(self, s):
        s = np.asarray(s, dtype=float)
        return np.concatenate([s, np.zeros(s.shape[:-1] + (1,))], axis=-1)

    def jacobian(self, s):
        s = np.asarray(s, dtype=float)
        J = np.zeros(s.shape[:-1] + (3, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        return J

    def hessian(self, s):
        s = np.asarray(s, dtype=float)
        return np.zeros(s.shape[:-1] + (3, 2, 2))


@dataclass(frozen=True)
class GraphHeight:
    """Graph of z = sqrt(r - t + a cos^2(k pi t / 2)) with t = x^2 + y^2.

    ``a = 0`` is the sphere of radius sqrt(r); ``a > 0`` adds a radial
    cosine ripple of amplitude ``a`` and frequency ``k``.
    """

    r: float = 2.0
    a: float = 0.0
    k: float = 5.0

    kind = "GraphHeight"

    def params(self):
        return (self.r, self.a, self.k)

    @property
    def omega(self):
        return 0.5 * self.k * np.pi

    def radicand(self, s):
        s = np.asarray(s, dtype=float)
        t = np.sum(s * s, axis=-1)
        return self.r - t + self.a * np.cos(self.omega * t) ** 2

    def contains(self, s):
        return self.radicand(s) > 0.0

    def _check(self, s):
        if np.any(~self.contains(s)):
            raise GeometryError(
                f"radicand nonpositive for GraphHeight(r={self.r}, a={self.a}, k={self.k})"
            )

    def _radial(self, s):
        # q(t) and its first two derivatives in t
        t = np.sum(s * s, axis=-1)
        w = self.omega
        q = self.r - t + self.a * np.cos(w * t) ** 2
        dq = -1.0 - self.a * w * np.sin(2 * w * t)
        d2q = -2.0 * self.a * w * w * np.cos(2 * w * t)
        return q, dq, d2q

    def height_derivatives(self, s):
        """Return h, (h_x, h_y) and the 2x2 Hessian of the height."""
        s = np.asarray(s, dtype=float)
        self._check(s)
        q, dq, d2q = self._radial(s)
        h = np.sqrt(q)
        # Q(x, y) = q(x^2 + y^2); h = sqrt(Q)
        dQ = 2.0 * s * dq[..., None]
        d2Q = 4.0 * d2q[..., None, None] * s[..., :, None] * s[..., None, :]
        d2Q = d2Q + 2.0 * dq[..., None, None] * np.eye(2)
        dh = dQ / (2.0 * h[..., None])
        d2h = d2Q / (2.0 * h[..., None, None]) - dQ[..., :, None] * dQ[..., None, :] / (
            4.0 * h[..., None, None] ** 3
        )
        return h, dh, d2h

    def eval(self, s):
        s = np.asarray(s, dtype=float)
        self._check(s)
        h = np.sqrt(self.radicand(s))
        return np.concatenate([s, h[..., None]], axis=-1)

    def jacobian(self, s):
        _, dh, _ = self.height_derivatives(s)
        J = np.zeros(dh.shape[:-1] + (3, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        J[..., 2, :] = dh
        return J

    def hessian(self, s):
        _, _, d2h = self.height_derivatives(s)
        H = np.zeros(d2h.shape[:-2] + (3, 2, 2))
        H[..., 2, :, :] = d2h
        return H


def _stereo_parts(s, sign):
    s = np.asarray(s, dtype=float)
    rho2 = np.sum(s * s, axis=-1)
    d = 1.0 + rho2
    X = np.empty(s.shape[:-1] + (3,))
    X[..., 0] = 2.0 * s[..., 0] / d
    X[..., 1] = 2.0 * s[..., 1] / d
    X[..., 2] = sign * (1.0 - rho2) / d
    return s, rho2, d, X


@dataclass(frozen=True)
class _Stereographic:
    # sign = +1: northern hemisphere for |s| <= 1, sign = -1: southern
    sign = 1.0

    def params(self):
        return ()

    def contains(self, s):
        return np.all(np.isfinite(np.asarray(s, dtype=float)), axis=-1)

    def eval(self, s):
        return _stereo_parts(s, self.sign)[3]

    def interface_midpoint(self, s0, s1):
        """Midpoint with geometric-mean radius and mean angle.

        Unlike the linear midpoint it commutes with the transition
        s -> s / |s|^2, so both charts see the same point on an interface edge.
        """
        z0 = np.asarray(s0, dtype=float) @ np.array([1.0, 1j])
        z1 = np.asarray(s1, dtype=float) @ np.array([1.0, 1j])
        if np.any(z0 == 0) or np.any(z1 == 0):
            raise GeometryError("interface midpoint undefined at the chart origin")
        w = np.sqrt(z0 * z1)
        # branch closest to the chord midpoint
        w = np.where((w * np.conj(z0 + z1)).real < 0, -w, w)
        return np.stack([w.real, w.imag], axis=-1)

    def jacobian(self, s):
        s, rho2, d, _ = _stereo_parts(s, self.sign)
        J = np.empty(s.shape[:-1] + (3, 2))
        eye = np.eye(2)
        for i in range(2):
            for m in range(2):
                # d/ds_i (2 s_m / d)
                J[..., m, i] = 2.0 * eye[m, i] / d - 4.0 * s[..., m] * s[..., i] / d**2
            # d/ds_i (sign (1 - rho2)/d) = sign * (-4 s_i / d^2)
            J[..., 2, i] = self.sign * (-4.0 * s[..., i] / d**2)
        return J

    def hessian(self, s):
        s, rho2, d, _ = _stereo_parts(s, self.sign)
        H = np.empty(s.shape[:-1] + (3, 2, 2))
        eye = np.eye(2)
        for i in range(2):
            for j in range(2):
                for m in range(2):
                    H[..., m, i, j] = (
                        -4.0 * (eye[m, i] * s[..., j] + eye[m, j] * s[..., i] + eye[i, j] * s[..., m]) / d**2
                        + 16.0 * s[..., m] * s[..., i] * s[..., j] / d**3
                    )
                H[..., 2, i, j] = self.sign * (
                    -4.0 * eye[i, j] / d**2 + 16.0 * s[..., i] * s[..., j] / d**3
                )
        return H


@dataclass(frozen=True)
class StereographicNorth(_Stereographic):
    """Inverse stereographic projection from the south pole.

    The closed unit disk maps onto the closed northern hemisphere.
    """

    kind = "StereographicNorth"
    sign = 1.0


@dataclass(frozen=True)
class StereographicSouth(_Stereographic):
    """Mirror of :class:`StereographicNorth` through the equatorial plane."""

    kind = "StereographicSouth"
    sign = -1.0


Chart = Union[FlatPlane, GraphHeight, StereographicNorth, StereographicSouth]

CHART_KINDS = {
    "FlatPlane": FlatPlane,
    "GraphHeight": GraphHeight,
    "StereographicNorth": StereographicNorth,
    "StereographicSouth": StereographicSouth,
}


def make_chart(kind: str, *params: float) -> Chart:
    try:
        cls = CHART_KINDS[kind]
    except KeyError:
        raise GeometryError(f"unknown chart kind {kind!r}") from None
    return cls(*params)


@dataclass(frozen=True)
class TangentFrame:
    """Gram-Schmidt tangent frame; fields may be batched along leading axes."""

    e1: np.ndarray
    e2: np.ndarray
    g11: np.ndarray
    g22: np.ndarray
    sqrt_det_g: np.ndarray
    normal: np.ndarray

    def components(self, v):
        """Contravariant components of the tangential part of ambient ``v``."""
        v = np.asarray(v, dtype=float)
        w1 = np.sum(self.e1 * v, axis=-1) / self.g11
        w2 = np.sum(self.e2 * v, axis=-1) / self.g22
        return np.stack([w1, w2], axis=-1)


@dataclass(frozen=True)
class FullMetric:
    """Coordinate metric G = J^T J and its derivatives dG[..., k, :, :] = dG/ds_k."""

    G: np.ndarray
    dG: np.ndarray


def chart_eval(chart: Chart, s) -> np.ndarray:
    return chart.eval(s)


def chart_frame(chart: Chart, s) -> TangentFrame:
    J = chart.jacobian(s)
    e1 = J[..., :, 0]
    x2 = J[..., :, 1]
    g11 = np.sum(e1 * e1, axis=-1)
    e2 = x2 - (np.sum(x2 * e1, axis=-1) / g11)[..., None] * e1
    g22 = np.sum(e2 * e2, axis=-1)
    cross = np.cross(e1, e2)
    cn = np.linalg.norm(cross, axis=-1)
    if np.any(cn < DEGENERATE_TOL):
        raise GeometryError("degenerate chart Jacobian")
    return TangentFrame(
        e1=e1,
        e2=e2,
        g11=g11,
        g22=g22,
        sqrt_det_g=np.sqrt(g11 * g22),
        normal=cross / cn[..., None],
    )


def full_metric(chart: Chart, s) -> FullMetric:
    J = chart.jacobian(s)
    H = chart.hessian(s)
    G = np.einsum("...mi,...mj->...ij", J, J)
    # d_k G_ij = H_ki . J_j + J_i . H_kj
    dG = np.einsum("...mki,...mj->...kij", H, J)
    dG = dG + np.swapaxes(dG, -1, -2)
    if np.any(np.linalg.det(G) <= DEGENERATE_TOL**2):
        raise GeometryError("degenerate chart Jacobian")
    return FullMetric(G=G, dG=dG)


@dataclass(frozen=True)
class ChartField:
    """Scalar field on chart coordinates with analytic derivatives.

    ``value(s)`` has shape ``s.shape[:-1]``, ``grad(s)`` adds a trailing
    axis of length 2 and ``hess(s)`` two trailing axes.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


def ambient_linear_field(chart: Chart, coeffs) -> ChartField:
    """The field ``coeffs . x`` restricted to the surface, pulled back to the chart."""
    c = np.asarray(coeffs, dtype=float)
    return ChartField(
        value=lambda s: chart.eval(s) @ c,
        grad=lambda s: np.einsum("m,...mi->...i", c, chart.jacobian(s)),
        hess=lambda s: np.einsum("m,...mij->...ij", c, chart.hessian(s)),
    )


def laplace_beltrami(chart: Chart, u: ChartField, s) -> np.ndarray:
    """Exact Laplace-Beltrami operator of ``u`` at chart points ``s``.

    Evaluates (1/sqrt|G|) d_i (sqrt|G| G^ij d_j u) by the product rule.
    """
    m = full_metric(chart, s)
    Ginv = np.linalg.inv(m.G)
    du = u.grad(s)
    d2u = u.hess(s)
    flux = np.einsum("...ij,...j->...i", Ginv, du)
    # d_k log sqrt|G| = tr(G^-1 d_k G) / 2
    dlog = 0.5 * np.einsum("...ij,...kji->...k", Ginv, m.dG)
    # d_k G^kj = -(G^-1 dG_k G^-1)_kj
    dGinv = -np.einsum("...ka,...kab,...bj->...j", Ginv, m.dG, Ginv)
    return (
        np.einsum("...ij,...ij->...", Ginv, d2u)
        + np.einsum("...k,...k->...", dlog, flux)
        + np.einsum("...j,...j->...", dGinv, du)
    )


def second_form_norm(chart: Chart, s) -> np.ndarray:
    """Largest absolute principal curvature at ``s``."""
    J = chart.jacobian(s)
    H = chart.hessian(s)
    n = np.cross(J[..., :, 0], J[..., :, 1])
    n = n / np.linalg.norm(n, axis=-1)[..., None]
    B = np.einsum("...m,...mij->...ij", n, H)
    G = np.einsum("...mi,...mj->...ij", J, J)
    # G^-1 B is self-adjoint in the G inner product, so eigenvalues are real
    kappa = np.linalg.eigvals(np.linalg.solve(G, B)).real
    return np.max(np.abs(kappa), axis=-1)


def transition_north_south(s) -> np.ndarray:
    """Chart change between the two stereographic charts: s -> s / |s|^2."""
    s = np.asarray(s, dtype=float)
    rho2 = np.sum(s * s, axis=-1)
    if np.any(rho2 == 0.0):
        raise GeometryError("transition map undefined at the origin")
    return s / rho2[..., None]


def transition(src: Chart, dst: Chart, s) -> np.ndarray:
    """Map chart coordinates of ``src`` to those of ``dst`` for the same surface point."""
    if src == dst:
        return np.asarray(s, dtype=float)
    stereo = (StereographicNorth, StereographicSouth)
    if isinstance(src, stereo) and isinstance(dst, stereo):
        return transition_north_south(s)
    raise GeometryError(f"no transition map from {src.kind} to {dst.kind}")
