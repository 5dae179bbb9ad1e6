"""P1 element kernels: quadrature, basis evaluation, field sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

_SQRT15 = np.sqrt(15.0)


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle, barycentric points.

    Weights refer to the reference triangle of area 1/2, so they sum
    to 1/2 and integrals on a physical element pick up a factor 2*area.
    """

    degree: int
    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)


@dataclass(frozen=True)
class ElementFieldSample:
    value: float
    gradient: np.ndarray  # (2,)


def quadrature_rule(degree: int) -> QuadratureRule:
    """Midpoint (degree 2, 3 points) or degree-5 (7 points) triangle rule."""
    if degree == 2:
        points = np.array(
            [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        )
        weights = np.full(3, 1.0 / 6.0)
    elif degree == 5:
        a = (6.0 - _SQRT15) / 21.0
        b = (6.0 + _SQRT15) / 21.0
        wa = (155.0 - _SQRT15) / 1200.0
        wb = (155.0 + _SQRT15) / 1200.0
        third = 1.0 / 3.0
        points = np.array(
            [
                [third, third, third],
                [a, a, 1.0 - 2.0 * a],
                [a, 1.0 - 2.0 * a, a],
                [1.0 - 2.0 * a, a, a],
                [b, b, 1.0 - 2.0 * b],
                [b, 1.0 - 2.0 * b, b],
                [1.0 - 2.0 * b, b, b],
            ]
        )
        weights = 0.5 * np.array([9.0 / 40.0, wa, wa, wa, wb, wb, wb])
    else:
        raise ValueError(f"unsupported quadrature degree {degree}, expected 2 or 5")
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(degree=degree, points=points, weights=weights)


def sample_field(
    mesh: Mesh, element: int, nodal_values: np.ndarray, quad_point
) -> ElementFieldSample:
    """Value and (constant) gradient of a nodal field at one quadrature point.

    ``quad_point`` is a barycentric coordinate triple.
    """
    if not 0 <= element < mesh.n_el:
        raise ValueError(f"element index {element} out of range [0, {mesh.n_el})")
    bary = np.asarray(quad_point, dtype=float)
    local = np.asarray(nodal_values)[mesh.elements[element]]
    value = float(bary @ local)
    gradient = local @ mesh.grads[element]
    return ElementFieldSample(value=value, gradient=gradient)


# Vectorized helpers shared by the assembly and error-norm kernels.

def quad_coords(mesh: Mesh, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Physical x and y coordinates of all quadrature points, shape (n_el, nq)."""
    corner = mesh.nodes[mesh.elements]           # (n_el, 3, 2)
    phys = np.einsum("qi,eid->eqd", rule.points, corner)
    return phys[..., 0], phys[..., 1]


def values_at_quad(mesh: Mesh, rule: QuadratureRule, nodal: np.ndarray) -> np.ndarray:
    """P1 interpolation of a nodal field at all quadrature points, (n_el, nq)."""
    return np.einsum("qi,ei->eq", rule.points, nodal[mesh.elements])


def element_gradients(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Constant per-element gradient of a nodal field, shape (n_el, 2)."""
    return np.einsum("ei,eid->ed", nodal[mesh.elements], mesh.grads)
