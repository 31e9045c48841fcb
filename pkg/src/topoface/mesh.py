"""Template mesh topology: 1-ring neighborhoods, uniform Laplacian, icosphere.

The template carries per-vertex UV coordinates (each vertex a unique pair),
triangle connectivity, and precomputed 1-ring neighborhoods stored CSR-style
(flat index array + offsets) so the Laplacian can be evaluated vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshTopologyError(ValueError):
    pass


def precompute_neighborhoods(faces: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """1-ring neighborhoods from a triangle list.

    Returns (indices, offsets): neighborhood of vertex j is
    indices[offsets[j]:offsets[j+1]], sorted and deduplicated. Rejects
    out-of-range face indices and isolated vertices.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= n_vertices):
        raise MeshTopologyError("face indices out of range")
    src = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2], faces[:, 1], faces[:, 2], faces[:, 0]])
    dst = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0], faces[:, 0], faces[:, 1], faces[:, 2]])
    edges = np.unique(np.stack([src, dst], axis=1), axis=0)
    counts = np.bincount(edges[:, 0], minlength=n_vertices)
    if (counts == 0).any():
        bad = int(np.nonzero(counts == 0)[0][0])
        raise MeshTopologyError(f"isolated vertex {bad} (empty neighborhood)")
    offsets = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return edges[:, 1].copy(), offsets


@dataclass(frozen=True)
class TemplateMesh:
    """N vertices with unique UVs, triangle faces, precomputed 1-rings."""

    uv: np.ndarray          # (N, 2) in [0, 1]^2
    faces: np.ndarray       # (F, 3) int
    nbr_indices: np.ndarray  # flat neighbor list
    nbr_offsets: np.ndarray  # (N+1,)

    @classmethod
    def build(cls, uv: np.ndarray, faces: np.ndarray) -> "TemplateMesh":
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        n = uv.shape[0]
        if not np.isfinite(uv).all():
            raise MeshTopologyError("UV coordinates must be finite")
        if len(np.unique(uv, axis=0)) != n:
            raise MeshTopologyError("template UVs are not unique per vertex")
        indices, offsets = precompute_neighborhoods(faces, n)
        return cls(uv=uv, faces=faces, nbr_indices=indices, nbr_offsets=offsets)

    @property
    def n_vertices(self) -> int:
        return self.uv.shape[0]

    def neighbors(self, j: int) -> np.ndarray:
        return self.nbr_indices[self.nbr_offsets[j]:self.nbr_offsets[j + 1]]

    @property
    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.nbr_offsets)


def neighbor_means(points: np.ndarray, mesh: TemplateMesh) -> np.ndarray:
    """(N, 3) array of 1-ring averages."""
    points = np.asarray(points, dtype=np.float64)
    sums = np.add.reduceat(points[mesh.nbr_indices], mesh.nbr_offsets[:-1], axis=0)
    return sums / mesh.neighbor_counts[:, None]


def laplacian_vector(points: np.ndarray, j: int, mesh: TemplateMesh) -> np.ndarray:
    """p_j minus the mean of its 1-ring."""
    nbrs = mesh.neighbors(j)
    return np.asarray(points[j], dtype=np.float64) - points[nbrs].mean(axis=0)


def laplacian_all(points: np.ndarray, mesh: TemplateMesh) -> np.ndarray:
    """(N, 3) uniform Laplacian vectors, p_j - mean over N(j)."""
    return np.asarray(points, dtype=np.float64) - neighbor_means(points, mesh)


@dataclass
class FaceMesh:
    """Plain vertices + triangles, optionally with UVs carried along."""

    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray     # (F, 3)
    uv: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)


_ICOSAHEDRON_VERTS = None
_ICOSAHEDRON_FACES = None


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    global _ICOSAHEDRON_VERTS, _ICOSAHEDRON_FACES
    if _ICOSAHEDRON_VERTS is None:
        phi = (1.0 + np.sqrt(5.0)) / 2.0
        v = np.array(
            [
                [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
            ],
            dtype=np.float64,
        )
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        f = np.array(
            [
                [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
            ],
            dtype=np.int64,
        )
        _ICOSAHEDRON_VERTS, _ICOSAHEDRON_FACES = v, f
    return _ICOSAHEDRON_VERTS.copy(), _ICOSAHEDRON_FACES.copy()


def sphere_uv(vertices: np.ndarray) -> np.ndarray:
    """Spherical UV chart: azimuth -> u, elevation -> v, both into [0, 1]."""
    v = np.asarray(vertices, dtype=np.float64)
    r = np.linalg.norm(v, axis=1)
    u = np.arctan2(v[:, 1], v[:, 0]) / (2.0 * np.pi) + 0.5
    w = np.arcsin(np.clip(v[:, 2] / r, -1.0, 1.0)) / np.pi + 0.5
    return np.stack([u, w], axis=1)


def make_icosphere(subdivisions: int) -> FaceMesh:
    """Unit icosphere with a spherical UV chart (unique per vertex).

    Vertex count: 12, 42, 162, 642, 2562, 10242 for subdivisions 0..5.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                verts.append(m)
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.asarray(new_faces, dtype=np.int64)
    vertices = np.asarray(verts)
    return FaceMesh(vertices=vertices, faces=faces, uv=sphere_uv(vertices))


def make_icosphere_cap(subdivisions: int, cap_angle_deg: float) -> FaceMesh:
    """Spherical cap about +x cut from an icosphere: a face-patch proxy.

    Keeps vertices within cap_angle_deg of the +x axis and faces whose three
    corners survive; vertices are reindexed densely. The +x cap stays clear of
    the spherical chart's azimuth seam, so UVs remain continuous and unique.
    """
    sphere = make_icosphere(subdivisions)
    cos_cap = np.cos(np.deg2rad(cap_angle_deg))
    keep = sphere.vertices[:, 0] >= cos_cap
    face_keep = keep[sphere.faces].all(axis=1)
    faces_old = sphere.faces[face_keep]
    used = np.unique(faces_old)
    remap = np.full(len(sphere.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = sphere.vertices[used]
    return FaceMesh(vertices=vertices, faces=remap[faces_old], uv=sphere.uv[used])


def vertex_normals(mesh: FaceMesh) -> np.ndarray:
    """Area-weighted vertex normals, unit length."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normals = np.zeros_like(v)
    for k in range(3):
        np.add.at(normals, f[:, k], fn)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return normals / norms
