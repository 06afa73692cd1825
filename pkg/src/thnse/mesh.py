"""Uniform simplicial meshes of the flat torus (R / 2piZ)^d, d = 2 or 3.

The structured lattice of ``n**d`` cubes is split with the Kuhn
(Freudenthal) rule: the cube with lower corner ``i`` contains, for every
permutation ``s`` of the axes, the simplex ``i, i + e_s0, i + e_s0 + e_s1, ...``.
That gives 2 triangles per square in 2D and 6 tetrahedra per cube in 3D.

Vertices are identified periodically, so a cell may reference a vertex
through the opposite face of the box; the per-vertex ``shifts`` (each
component 0 or 2pi) recover the unwrapped coordinates.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from math import factorial

import numpy as np

from .errors import ConfigurationError

BOX_LENGTH = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class PeriodicMesh:
    dim: int
    n: int
    vertices: np.ndarray  # (n**dim, dim), coordinates in [0, 2pi)
    cells: np.ndarray  # (ncells, dim + 1) vertex ids
    shifts: np.ndarray  # (ncells, dim + 1, dim), components in {0, 2pi}
    lattice: np.ndarray  # (ncells, dim + 1, dim) unwrapped integer lattice coords

    @property
    def h(self) -> float:
        return BOX_LENGTH / self.n

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def volume(self) -> float:
        return BOX_LENGTH**self.dim

    @cached_property
    def cell_coords(self) -> np.ndarray:
        """Unwrapped vertex coordinates per cell, shape (ncells, dim + 1, dim)."""
        return self.vertices[self.cells] + self.shifts

    @cached_property
    def jacobians(self) -> np.ndarray:
        c = self.cell_coords
        return np.swapaxes(c[:, 1:, :] - c[:, :1, :], 1, 2)

    @cached_property
    def dets(self) -> np.ndarray:
        return np.linalg.det(self.jacobians)

    @cached_property
    def inv_jac_t(self) -> np.ndarray:
        return np.swapaxes(np.linalg.inv(self.jacobians), 1, 2)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return np.abs(self.dets) / factorial(self.dim)

    def map_points(self, ref_points: np.ndarray) -> np.ndarray:
        """Physical (unwrapped) images of reference points, shape (ncells, npts, dim)."""
        x0 = self.cell_coords[:, 0, :]
        return x0[:, None, :] + np.einsum("cij,qj->cqi", self.jacobians, ref_points)

    def facet_keys(self) -> list[tuple]:
        """Canonical torus key of every cell facet, in cell-major order.

        A facet is identified by its set of lattice points modulo the global
        translation group n*Z^d; translating the lexicographically smallest
        point into [0, n)^d makes the representation unique.
        """
        keys = []
        d = self.dim
        for pts in self.lattice:
            for omit in range(d + 1):
                keys.append(_canonical(np.delete(pts, omit, axis=0), self.n))
        return keys

    def cell_keys(self) -> list[tuple]:
        return [_canonical(pts, self.n) for pts in self.lattice]


@dataclass(frozen=True)
class CellGeometry:
    jacobian: np.ndarray
    translation: np.ndarray
    volume: float
    inv_jac_t: np.ndarray

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.jacobian))

    def to_physical(self, ref_point) -> np.ndarray:
        return self.translation + self.jacobian @ np.asarray(ref_point, dtype=float)

    def push_gradient(self, ref_grad) -> np.ndarray:
        return self.inv_jac_t @ np.asarray(ref_grad, dtype=float)


def _canonical(pts: np.ndarray, n: int) -> tuple:
    order = np.lexsort(pts.T[::-1])
    p0 = pts[order[0]]
    moved = pts + (np.mod(p0, n) - p0)
    return tuple(sorted(map(tuple, moved.tolist())))


def _kuhn_simplices(dim: int) -> list[np.ndarray]:
    """Positively oriented Kuhn simplices of the unit cube as lattice offsets."""
    simplices = []
    eye = np.eye(dim, dtype=np.int64)
    for perm in itertools.permutations(range(dim)):
        pts = [np.zeros(dim, dtype=np.int64)]
        for axis in perm:
            pts.append(pts[-1] + eye[axis])
        pts = np.array(pts)
        if np.linalg.det((pts[1:] - pts[0]).T.astype(float)) < 0:
            pts[[-2, -1]] = pts[[-1, -2]]
        simplices.append(pts)
    return simplices


def build_periodic_mesh(dim: int, n: int) -> PeriodicMesh:
    """Uniform Kuhn triangulation of the 2pi-periodic box with n cells per axis."""
    if dim not in (2, 3):
        raise ConfigurationError(f"dimension must be 2 or 3, got {dim!r}")
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigurationError(f"cells per axis must be an integer >= 1, got {n!r}")
    n = int(n)
    h = BOX_LENGTH / n
    shape = (n,) * dim

    corners = np.array(list(itertools.product(range(n), repeat=dim)), dtype=np.int64)
    vertices = corners * h

    offsets = np.array(_kuhn_simplices(dim))  # (nsimp, dim + 1, dim)
    lattice = (corners[:, None, None, :] + offsets[None, :, :, :]).reshape(-1, dim + 1, dim)
    wrapped = np.mod(lattice, n)
    cells = np.ravel_multi_index(tuple(np.moveaxis(wrapped, -1, 0)), shape)
    shifts = (lattice - wrapped) * h

    return PeriodicMesh(dim=dim, n=n, vertices=vertices, cells=cells.astype(np.int64),
                        shifts=shifts.astype(float), lattice=lattice)


def cell_geometry(mesh: PeriodicMesh, cell_index: int) -> CellGeometry:
    if not 0 <= cell_index < mesh.num_cells:
        raise IndexError(f"cell index {cell_index} out of range [0, {mesh.num_cells})")
    return CellGeometry(
        jacobian=mesh.jacobians[cell_index].copy(),
        translation=mesh.cell_coords[cell_index, 0].copy(),
        volume=float(mesh.cell_volumes[cell_index]),
        inv_jac_t=mesh.inv_jac_t[cell_index].copy(),
    )
