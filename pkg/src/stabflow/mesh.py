"""Structured triangular meshes of the unit square with boundary tagging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_BOUNDARY_TOL = 1e-14


@dataclass(frozen=True)
class Mesh:
    """Conforming P1 triangulation of the unit square.

    All elements are positively oriented (counterclockwise).  Geometry
    arrays are precomputed once so element kernels can run vectorized:
    ``areas[e]`` is the element area, ``grads[e, i, :]`` the constant
    gradient of local basis function ``i`` and ``edge_h[e]`` the longest
    edge of element ``e``.

    Instances are immutable after construction and safe to share across
    workers.
    """

    nodes: np.ndarray             # (n_nodes, 2)
    elements: np.ndarray          # (n_el, 3) int, CCW
    boundary_nodes: np.ndarray    # sorted node indices on the boundary
    h: float                      # max element diameter (longest edge)
    areas: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)   # (n_el, 3, 2)
    edge_h: np.ndarray = field(repr=False, default=None)  # (n_el,)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_el(self) -> int:
        return len(self.elements)

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask


def _geometry(nodes: np.ndarray, elements: np.ndarray):
    """Areas, P1 basis gradients and longest edges for all elements."""
    p0 = nodes[elements[:, 0]]
    p1 = nodes[elements[:, 1]]
    p2 = nodes[elements[:, 2]]
    d1 = p1 - p0
    d2 = p2 - p0
    twice_area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(twice_area <= 0.0):
        bad = int(np.argmax(twice_area <= 0.0))
        raise ValueError(f"element {bad} is not counterclockwise oriented")
    # grad of barycentric coordinate i is the inward normal of the opposite
    # edge scaled by 1/(2A); rotate edge vectors by 90 degrees.
    e0 = p2 - p1
    e1 = p0 - p2
    e2 = p1 - p0
    grads = np.empty((len(elements), 3, 2))
    for i, edge in enumerate((e0, e1, e2)):
        grads[:, i, 0] = -edge[:, 1] / twice_area
        grads[:, i, 1] = edge[:, 0] / twice_area
    lengths = np.stack(
        [np.hypot(e[:, 0], e[:, 1]) for e in (e0, e1, e2)], axis=1
    )
    return 0.5 * twice_area, grads, lengths.max(axis=1)


def build_unit_square_mesh(n: int) -> Mesh:
    """Uniform n-by-n lattice, each cell split along its ascending diagonal.

    Produces (n+1)^2 nodes and 2*n^2 triangles with h = sqrt(2)/n.  The
    diagonal always runs lower-left to upper-right so that repeated builds
    are bitwise identical.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"subdivision count must be a positive integer, got {n!r}")
    side = np.linspace(0.0, 1.0, n + 1)
    xv, yv = np.meshgrid(side, side, indexing="ij")
    nodes = np.column_stack([xv.ravel(), yv.ravel()])

    def nid(i, j):
        return i * (n + 1) + j

    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    k = 0
    for i in range(n):
        for j in range(n):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            elements[k] = (n00, n10, n11)
            elements[k + 1] = (n00, n11, n01)
            k += 2

    on_boundary = (
        (np.abs(nodes[:, 0]) < _BOUNDARY_TOL)
        | (np.abs(nodes[:, 0] - 1.0) < _BOUNDARY_TOL)
        | (np.abs(nodes[:, 1]) < _BOUNDARY_TOL)
        | (np.abs(nodes[:, 1] - 1.0) < _BOUNDARY_TOL)
    )
    areas, grads, edge_h = _geometry(nodes, elements)
    mesh = Mesh(
        nodes=nodes,
        elements=elements,
        boundary_nodes=np.flatnonzero(on_boundary),
        h=float(edge_h.max()),
        areas=areas,
        grads=grads,
        edge_h=edge_h,
    )
    return mesh


def element_geometry(mesh: Mesh, e: int):
    """Area and the three constant P1 basis gradients of element ``e``."""
    if not 0 <= e < mesh.n_el:
        raise ValueError(f"element index {e} out of range [0, {mesh.n_el})")
    return float(mesh.areas[e]), mesh.grads[e].copy()
