"""Cubed-sphere triangulations of the unit sphere.

Vertices are placed with the equidistant gnomonic map: a point ``(a, b)`` on a
cube face, ``a, b`` on a uniform grid in ``[-1, 1]``, is pushed radially onto
the unit sphere.  Quads are split "union-jack" style in the face's own
``(t1, t2)`` parametrisation (``t1 x t2`` is the outward normal): the diagonal
always points at the face centre, i.e. quads whose centre has
``(a, b)`` with ``a * b >= 0`` use the ``(i, j)-(i+1, j+1)`` diagonal and the
others use ``(i+1, j)-(i, j+1)``.  The diagonal then splits the 120 degree
angles at cube corners, which avoids obtuse angle pairs, and it is inherited
unchanged by midpoint refinement for level >= 1.

Vertex numbering: the 8 cube corners, then the interior points of the 12 cube
edges, then the interior points of the 6 faces (face by face, lexicographic in
``(i, j)``).  Corners and edge points are sorted by their integer cube
coordinates so the numbering is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_LEVEL = 8

# (normal axis, normal sign, t1 axis, t1 sign, t2 axis, t2 sign); t1 x t2 = outward normal
_FACES = (
    (0, +1, 1, +1, 2, +1),
    (0, -1, 2, +1, 1, +1),
    (1, +1, 2, +1, 0, +1),
    (1, -1, 0, +1, 2, +1),
    (2, +1, 0, +1, 1, +1),
    (2, -1, 1, +1, 0, +1),
)


class MeshError(ValueError):
    """Invalid mesh request or degenerate geometry."""


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangulated closed surface in 3-space.

    ``vertices`` is ``(V, 3)``, ``triangles`` is ``(F, 3)`` (counter-clockwise
    w.r.t. the outward normal), ``edges`` is ``(E, 2)`` with ``i < j`` sorted
    lexicographically.  ``vertex_stencils[i]`` holds the edge neighbours of
    vertex ``i`` in increasing order.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    refinement_level: int = 0
    edges: np.ndarray = field(init=False, repr=False)
    vertex_stencils: tuple = field(init=False, repr=False)

    def __post_init__(self):
        tri = np.ascontiguousarray(self.triangles, dtype=np.int64)
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        verts.setflags(write=False)
        tri.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tri)
        edges = _unique_edges(tri)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        nbrs = [[] for _ in range(len(verts))]
        for i, j in edges:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        object.__setattr__(self, "vertex_stencils", tuple(tuple(sorted(n)) for n in nbrs))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def edge_triangle_counts(self) -> np.ndarray:
        """Number of triangles sharing each entry of ``edges``."""
        all_e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, inverse, counts = np.unique(all_e, axis=0, return_inverse=True, return_counts=True)
        return counts

    def is_consistently_oriented(self) -> bool:
        """Every directed edge appears exactly once (closed, orientable)."""
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        uniq = np.unique(directed, axis=0)
        if len(uniq) != len(directed):
            return False
        reverse = set(map(tuple, directed[:, ::-1].tolist()))
        return all(tuple(d) in reverse for d in directed.tolist())

    def outward_oriented(self) -> bool:
        """For star-shaped surfaces about the origin: normals point away from it."""
        p = self.vertices[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return bool(np.all(np.einsum("ij,ij->i", n, p.mean(axis=1)) > 0))


def _unique_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0)


def _check_level(level: int) -> None:
    if int(level) != level or level < 0:
        raise MeshError(f"refinement level must be a non-negative integer, got {level!r}")
    if level > MAX_LEVEL:
        raise MeshError(f"refinement level {level} exceeds the memory guard {MAX_LEVEL}")


def build_cubed_sphere(level: int) -> SurfaceMesh:
    """Cubed-sphere mesh with ``2**level`` quads per cube edge, each split into 2 triangles."""
    _check_level(level)
    n = 2**level
    # integer cube coordinates in [-n, n]^3; exact, so deduplication is exact
    face_grids = []
    for normal, ns, a1, s1, a2, s2 in _FACES:
        ij = np.stack(np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij"), axis=-1)
        pts = np.zeros((n + 1, n + 1, 3), dtype=np.int64)
        pts[..., normal] = ns * n
        pts[..., a1] = s1 * (2 * ij[..., 0] - n)
        pts[..., a2] = s2 * (2 * ij[..., 1] - n)
        face_grids.append(pts)

    on_boundary = {}
    for pts in face_grids:
        for key in map(tuple, pts.reshape(-1, 3).tolist()):
            n_extreme = sum(abs(c) == n for c in key)
            if n_extreme >= 2:
                on_boundary[key] = n_extreme
    corners = sorted(k for k, m in on_boundary.items() if m == 3)
    edge_pts = sorted(k for k, m in on_boundary.items() if m == 2)

    index = {}
    for key in corners + edge_pts:
        index[key] = len(index)
    for pts in face_grids:
        for i in range(1, n):
            for j in range(1, n):
                index[tuple(pts[i, j].tolist())] = len(index)

    cube = np.empty((len(index), 3))
    for key, k in index.items():
        cube[k] = key
    vertices = cube / np.linalg.norm(cube, axis=1, keepdims=True)

    tris = []
    for pts in face_grids:
        ids = np.empty((n + 1, n + 1), dtype=np.int64)
        for i in range(n + 1):
            for j in range(n + 1):
                ids[i, j] = index[tuple(pts[i, j].tolist())]
        p00 = ids[:-1, :-1].ravel()
        p10 = ids[1:, :-1].ravel()
        p11 = ids[1:, 1:].ravel()
        p01 = ids[:-1, 1:].ravel()
        centre = np.arange(n) + 0.5 - 0.5 * n
        main = (centre[:, None] * centre[None, :] >= 0).ravel()
        t1 = np.where(main[:, None], np.stack([p00, p10, p11], axis=1), np.stack([p00, p10, p01], axis=1))
        t2 = np.where(main[:, None], np.stack([p00, p11, p01], axis=1), np.stack([p10, p11, p01], axis=1))
        tris.append(t1)
        tris.append(t2)
    triangles = np.concatenate(tris)
    return SurfaceMesh(vertices, triangles, refinement_level=level)


def refine(mesh: SurfaceMesh) -> SurfaceMesh:
    """Split every triangle into four at its edge midpoints.

    Midpoints are taken on the circumscribed cube (``x / max|x_k|``) and then
    projected radially, which keeps the equidistant gnomonic spacing: the
    result has the vertex set of ``build_cubed_sphere(level + 1)``.
    Existing vertices keep their indices; new ones follow in ``mesh.edges`` order.
    """
    _check_level(mesh.refinement_level + 1)
    verts = mesh.vertices
    edges = mesh.edges
    on_cube = verts / np.abs(verts).max(axis=1, keepdims=True)
    mid = 0.5 * (on_cube[edges[:, 0]] + on_cube[edges[:, 1]])
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nv = len(verts)
    edge_id = {(int(i), int(j)): nv + k for k, (i, j) in enumerate(edges)}

    def m(a, b):
        return edge_id[(a, b) if a < b else (b, a)]

    new_tris = np.empty((4 * mesh.n_triangles, 3), dtype=np.int64)
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        new_tris[4 * t : 4 * t + 4] = ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))
    return SurfaceMesh(np.vstack([verts, mid]), new_tris, refinement_level=mesh.refinement_level + 1)


def surface_area(mesh: SurfaceMesh) -> float:
    """Total area of the flat triangles."""
    areas = mesh.triangle_areas()
    if np.any(areas <= 1e-14 * max(areas.max(), 1.0)):
        bad = int(np.argmin(areas))
        raise MeshError(f"degenerate triangle {bad} with area {areas[bad]:.3e}")
    return float(areas.sum())


def mean_edge_length(mesh: SurfaceMesh) -> float:
    return float(mesh.edge_lengths().mean())
