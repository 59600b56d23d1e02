"""Uniform periodic meshes of the torus [-1, 1]^d.

Cells are congruent cubes indexed lexicographically (C order, axis 0
slowest).  Every geometric face appears exactly once in the face set and
carries a fixed global orientation: its unit normal points in the
positive axis direction, the "in" cell sits on the negative side and the
"out" cell is the periodic +1 neighbour along that axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, NamedTuple

import numpy as np

TORUS_LENGTH = 2.0  # side length of the periodic box, per axis
SUPPORTED_DIMS = (2, 3)


class MeshError(ValueError):
    """Invalid mesh construction request."""


class ProjectionError(ValueError):
    """Cell averaging failed (non-finite data, bad quadrature order)."""


class Face(NamedTuple):
    """One oriented face: normal +e_axis, in_cell -> out_cell."""

    axis: int
    in_cell: int
    out_cell: int


@dataclass(frozen=True)
class TorusMesh:
    """Uniform cube mesh of [-1, 1]^d with periodic wrap.

    Immutable after construction; safe to share across workers.
    """

    d: int
    n: int

    @property
    def h(self) -> float:
        return TORUS_LENGTH / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cell_count(self) -> int:
        return self.n**self.d

    @property
    def face_count(self) -> int:
        return self.d * self.cell_count

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def face_area(self) -> float:
        return self.h ** (self.d - 1)

    @property
    def domain_volume(self) -> float:
        return TORUS_LENGTH**self.d

    @cached_property
    def axis_centers(self) -> np.ndarray:
        c = -1.0 + (np.arange(self.n) + 0.5) * self.h
        c.flags.writeable = False
        return c

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """Cell centre coordinates, shape ``shape + (d,)``."""
        grids = np.meshgrid(*([self.axis_centers] * self.d), indexing="ij")
        centers = np.stack(grids, axis=-1)
        centers.flags.writeable = False
        return centers

    @cached_property
    def index_grid(self) -> np.ndarray:
        idx = np.arange(self.cell_count).reshape(self.shape)
        idx.flags.writeable = False
        return idx

    def out_cells(self, axis: int) -> np.ndarray:
        """Flat index of the +axis neighbour of every cell (periodic)."""
        return np.roll(self.index_grid, -1, axis=axis).ravel()

    def faces(self) -> Iterator[Face]:
        """All oriented faces, axis-major then lexicographic by in-cell."""
        flat = self.index_grid.ravel()
        for axis in range(self.d):
            outs = self.out_cells(axis)
            for c in range(self.cell_count):
                yield Face(axis, int(flat[c]), int(outs[c]))

    def normal(self, face: Face) -> np.ndarray:
        e = np.zeros(self.d)
        e[face.axis] = 1.0
        return e


def build_mesh(n: int, d: int = 2) -> TorusMesh:
    """Build a uniform periodic mesh with ``n`` cells per axis."""
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise MeshError(f"cell count must be an integer, got {n!r}")
    if n < 2:
        raise MeshError(f"need at least 2 cells per axis, got {n}")
    if d not in SUPPORTED_DIMS:
        raise MeshError(f"dimension must be one of {SUPPORTED_DIMS}, got {d}")
    return TorusMesh(d=int(d), n=int(n))


def gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [-1, 1]."""
    if order < 1:
        raise ProjectionError(f"quadrature order must be >= 1, got {order}")
    return np.polynomial.legendre.leggauss(int(order))


def project(f: Callable[[np.ndarray], np.ndarray], mesh: TorusMesh, order: int = 3):
    """Cell-average a pointwise function onto piecewise constants.

    ``f`` receives points of shape ``(m, d)`` and returns shape ``(m,)``
    for a scalar field or ``(m, d)`` for a vector field.  The average is
    a tensor-product Gauss-Legendre rule with ``order`` points per axis,
    exact for data constant on each cell.
    """
    from .fields import Field  # deferred: fields depends on mesh

    nodes, weights = gauss_rule(order)
    q = len(nodes)
    n, d, h = mesh.n, mesh.d, mesh.h
    axis_pts = (mesh.axis_centers[:, None] + 0.5 * h * nodes[None, :]).ravel()
    grids = np.meshgrid(*([axis_pts] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)

    vals = np.asarray(f(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ProjectionError("function returned non-finite values at quadrature nodes")
    if vals.shape == (len(pts),):
        ncomp = 0
    elif vals.shape == (len(pts), d):
        ncomp = d
    else:
        raise ProjectionError(
            f"function must return shape ({len(pts)},) or ({len(pts)}, {d}), got {vals.shape}"
        )

    comp = vals.reshape(((n, q) * d) + ((ncomp,) if ncomp else ()))
    w = weights / weights.sum()  # unit-mass weights: constants average exactly
    if d == 2:
        subscripts = "iajbc,a,b->ijc" if ncomp else "iajb,a,b->ij"
        avg = np.einsum(subscripts, comp, w, w)
    else:
        subscripts = "iajbkcx,a,b,c->ijkx" if ncomp else "iajbkc,a,b,c->ijk"
        avg = np.einsum(subscripts, comp, w, w, w)
    return Field(mesh, np.ascontiguousarray(avg))
