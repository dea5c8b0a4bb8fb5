"""Manufactured-solution problems used by the CLI and the convergence studies.

All cases use the ambient coordinate ``u = x`` as exact solution; the
forcing is synthesised from the exact Laplace-Beltrami operator in each
chart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .femcore import BoundaryCondition, ProblemSpec
from .geometry import ambient_linear_field, laplace_beltrami
from .mesh import SurfaceMesh, generate_flat, generate_tc1, generate_tc2_sphere

X_AXIS = np.array([1.0, 0.0, 0.0])


def exact_x(positions):
    return np.asarray(positions)[..., 0]


def exact_x_gradient(positions):
    return np.broadcast_to(X_AXIS, np.shape(positions)).copy()


def _forcing_x(reaction):
    def forcing(chart, s):
        u = ambient_linear_field(chart, X_AXIS)
        return -laplace_beltrami(chart, u, s) + reaction * u.value(s)

    return forcing


def tc1_problem() -> ProblemSpec:
    """f = -Lap_G x on the graph surface, exact values imposed on the boundary."""
    return ProblemSpec(
        forcing=_forcing_x(0.0),
        bc=BoundaryCondition.DIRICHLET_EXACT,
        exact=exact_x,
        exact_gradient=exact_x_gradient,
    )


def tc2_problem() -> ProblemSpec:
    """f = -Lap_G x + x on the unit sphere (closed, reaction coefficient 1)."""
    return ProblemSpec(
        forcing=_forcing_x(1.0),
        bc=BoundaryCondition.CLOSED,
        reaction=1.0,
        exact=exact_x,
        exact_gradient=exact_x_gradient,
    )


def flat_problem() -> ProblemSpec:
    """Harmonic u = x on a planar square; P1 reproduces it exactly."""
    return ProblemSpec(
        forcing=lambda chart, s: np.zeros(np.shape(s)[:-1]),
        bc=BoundaryCondition.DIRICHLET_EXACT,
        exact=exact_x,
        exact_gradient=exact_x_gradient,
    )


@dataclass(frozen=True)
class TestCase:
    name: str
    mesh_factory: Callable[[int], SurfaceMesh]
    problem: ProblemSpec
    last_k: int
    regenerate: bool = False  # build every level from mesh_factory instead of refining the previous one

    __test__ = False  # not a pytest class


def make_case(name: str, r: float = 2.0, a: float = 0.0, k: float = 5.0) -> TestCase:
    if name == "tc1":
        return TestCase("tc1", lambda level: generate_tc1(r, a, k, level), tc1_problem(), last_k=2, regenerate=True)
    if name == "tc2":
        return TestCase("tc2", lambda level: generate_tc2_sphere(level), tc2_problem(), last_k=3)
    if name == "flat":
        return TestCase("flat", lambda level: generate_flat(4, level), flat_problem(), last_k=2)
    raise ValueError(f"unknown test case {name!r}")
