"""P1 finite-element operators on flat-triangle surface meshes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import as_csr
from .mesh import MeshError, SurfaceMesh


def _triangle_geometry(vertices, triangles):
    p = vertices[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area = 0.5 * np.linalg.norm(n, axis=1)
    if np.any(area <= 1e-14 * max(area.max(), 1.0)):
        bad = int(np.argmin(area))
        raise MeshError(f"degenerate triangle {bad} with area {area[bad]:.3e}")
    return p, area


def _scatter(triangles, local, n):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return as_csr(sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)))


def assemble_mass(mesh: SurfaceMesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix: ``A_T/6`` on the diagonal, ``A_T/12`` off it."""
    _, area = _triangle_geometry(mesh.vertices, mesh.triangles)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = area[:, None, None] * ref[None]
    return _scatter(mesh.triangles, local, mesh.n_vertices)


def lump(M: sp.spmatrix) -> np.ndarray:
    """Row-sum lumping."""
    return np.asarray(M.sum(axis=1)).ravel()


def assemble_stiffness(mesh: SurfaceMesh) -> sp.csr_matrix:
    """Cotangent-weight P1 Laplace-Beltrami stiffness matrix (positive semidefinite).

    The entry for edge (i, j) of a triangle is ``-cot(theta_k) / 2`` with
    ``theta_k`` the angle opposite the edge; diagonals make row sums vanish.
    """
    p, area = _triangle_geometry(mesh.vertices, mesh.triangles)
    local = np.zeros((len(area), 3, 3))
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        ei = p[:, i] - p[:, k]
        ej = p[:, j] - p[:, k]
        cot = np.einsum("ij,ij->i", ei, ej) / (2.0 * area)
        w = -0.5 * cot
        local[:, i, j] = w
        local[:, j, i] = w
        local[:, i, i] -= w
        local[:, j, j] -= w
    return _scatter(mesh.triangles, local, mesh.n_vertices)


@dataclass
class QualityReport:
    count: int
    max_positive: float
    pairs: list = field(default_factory=list)

    def __str__(self):
        return f"{self.count} positive off-diagonal stiffness entries (max {self.max_positive:.3e})"


def mesh_quality_report(L: sp.spmatrix) -> QualityReport:
    """Positive off-diagonal entries of the stiffness matrix, one per unordered vertex pair.

    Each such pair has opposite angles summing to more than pi, which breaks
    the M-matrix structure the low-order scheme relies on.
    """
    U = sp.triu(sp.csr_matrix(L), k=1).tocoo()
    mask = U.data > 0.0
    pairs = sorted(zip(U.row[mask].tolist(), U.col[mask].tolist(), U.data[mask].tolist()))
    return QualityReport(len(pairs), float(U.data[mask].max()) if mask.any() else 0.0, pairs)


def integral_functional(M: sp.spmatrix, v: np.ndarray):
    """``G(v) = M v`` and its total ``sum_i G(v)_i``, the integral of the interpolant."""
    g = M @ v
    return g, float(g.sum())


@dataclass(frozen=True, eq=False)
class Operators:
    mesh: SurfaceMesh
    M: sp.csr_matrix
    M_lumped: np.ndarray
    L: sp.csr_matrix

    @property
    def area(self) -> float:
        return float(self.M_lumped.sum())


def build_operators(mesh: SurfaceMesh) -> Operators:
    M = assemble_mass(mesh)
    L = assemble_stiffness(mesh)
    # share one sparsity pattern: every P1 pair couples in both matrices
    if not (np.array_equal(M.indptr, L.indptr) and np.array_equal(M.indices, L.indices)):
        raise MeshError("mass and stiffness patterns differ")
    return Operators(mesh, M, lump(M), L)
