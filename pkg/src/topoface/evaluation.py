"""Measurement protocol: landmark-based rigid alignment + chamfer statistics.

Alignment is the closed-form least-squares (Umeyama) rotation/translation,
optionally with a uniform scale. Chamfer distances are single-direction
point-to-surface: uniformly area-sampled points of the predicted mesh
against the closest point on any ground-truth triangle, found through an
axis-aligned-box BVH whose results are exact (branch-and-bound).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mesh import FaceMesh


class DegenerateLandmarksError(ValueError):
    pass


@dataclass
class SimilarityTransform:
    rotation: np.ndarray   # (3, 3), det +1
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


def rigid_align(
    source: np.ndarray, target: np.ndarray, with_scale: bool = False
) -> SimilarityTransform:
    """Least-squares transform taking source landmarks onto target landmarks.

    Proper rotation enforced (det = +1, reflections corrected). Raises when
    the centered source has rank < 3.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or len(src) < 3:
        raise ValueError("need matching landmark sets of at least 3 points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    if np.linalg.matrix_rank(cs, tol=1e-12) < 3:
        raise DegenerateLandmarksError("landmark configuration has rank < 3 after centering")
    cov = cd.T @ cs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (cs**2).sum() / len(src)
        scale = float((d * np.diag(S)).sum() / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(rotation=R, translation=t, scale=scale)


def closest_on_triangles(q: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point to q on each triangle of tri (m, 3, 3); returns (m, 3).

    Region-based closest-point computation (Ericson), vectorized over
    triangles; degenerate triangles fall back to the nearest edge point.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    ap = q - a
    d1, d2 = (ab * ap).sum(1), (ac * ap).sum(1)
    bp = q - b
    d3, d4 = (ab * bp).sum(1), (ac * bp).sum(1)
    cp = q - c
    d5, d6 = (ab * cp).sum(1), (ac * cp).sum(1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    m = len(tri)
    out = np.zeros((m, 3))
    assigned = np.zeros(m, dtype=bool)

    def take(mask: np.ndarray, value: np.ndarray) -> None:
        nonlocal assigned
        mask = mask & ~assigned
        if mask.any():
            out[mask] = value[mask]
            assigned |= mask

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0) & np.isfinite(v), a + v[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0) & np.isfinite(w), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take(
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & np.isfinite(w),
            b + w[:, None] * (c - b),
        )
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        face = a + v[:, None] * ab + w[:, None] * ac
        take(np.isfinite(v) & np.isfinite(w), face)
    if not assigned.all():
        # degenerate leftovers: closest point on the three edges
        rest = np.nonzero(~assigned)[0]
        for k in rest:
            best, bd = None, np.inf
            for p0, p1 in ((a[k], b[k]), (b[k], c[k]), (c[k], a[k])):
                e = p1 - p0
                L = float(e @ e)
                s = 0.0 if L == 0.0 else float(np.clip((q - p0) @ e / L, 0.0, 1.0))
                cand = p0 + s * e
                dd = float(((q - cand) ** 2).sum())
                if dd < bd:
                    best, bd = cand, dd
            out[k] = best
    return out


class TriangleBVH:
    """Axis-aligned-box tree over triangles; exact closest-point queries."""

    def __init__(self, mesh: FaceMesh, leaf_size: int = 8):
        if len(mesh.faces) == 0:
            raise ValueError("mesh has no triangles")
        self.tris = mesh.vertices[mesh.faces]  # (F, 3, 3)
        lo, hi = self.tris.min(axis=1), self.tris.max(axis=1)
        centroids = self.tris.mean(axis=1)
        order = np.arange(len(self.tris))
        self.nodes: list[tuple] = []  # (lo, hi, left, right, start, count)

        def build(idx: np.ndarray) -> int:
            node_lo, node_hi = lo[idx].min(axis=0), hi[idx].max(axis=0)
            me = len(self.nodes)
            self.nodes.append(None)
            if len(idx) <= leaf_size:
                start = len(self._leaf_tris)
                self._leaf_tris.extend(idx.tolist())
                self.nodes[me] = (node_lo, node_hi, -1, -1, start, len(idx))
                return me
            axis = int(np.argmax(node_hi - node_lo))
            half = len(idx) // 2
            part = idx[np.argsort(centroids[idx, axis], kind="stable")]
            left = build(part[:half])
            right = build(part[half:])
            self.nodes[me] = (node_lo, node_hi, left, right, -1, 0)
            return me

        self._leaf_tris: list[int] = []
        build(order)  # median split keeps the depth logarithmic
        self._leaf_tris = np.asarray(self._leaf_tris, dtype=np.int64)

    @staticmethod
    def _box_dist2(q: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
        d = np.maximum(np.maximum(lo - q, 0.0), q - hi)
        return float(d @ d)

    def closest(self, q: np.ndarray) -> tuple[float, np.ndarray]:
        """(distance, closest point) from q to the triangle soup."""
        q = np.asarray(q, dtype=np.float64)
        best_d2, best_pt = np.inf, None
        stack = [0]
        while stack:
            ni = stack.pop()
            node_lo, node_hi, left, right, start, count = self.nodes[ni]
            if self._box_dist2(q, node_lo, node_hi) > best_d2:
                continue
            if left < 0:
                idx = self._leaf_tris[start: start + count]
                pts = closest_on_triangles(q, self.tris[idx])
                d2 = ((pts - q) ** 2).sum(axis=1)
                k = int(np.argmin(d2))
                if d2[k] < best_d2:
                    best_d2, best_pt = float(d2[k]), pts[k]
            else:
                dl = self._box_dist2(q, *self.nodes[left][:2])
                dr = self._box_dist2(q, *self.nodes[right][:2])
                if dl < dr:
                    stack += [right, left]  # nearer child popped first
                else:
                    stack += [left, right]
        return float(np.sqrt(best_d2)), best_pt

    def distances(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(queries)
        return np.array([self.closest(q)[0] for q in queries])


def sample_surface(mesh: FaceMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniform by area over the triangle surface."""
    tris = mesh.vertices[mesh.faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    face_idx = rng.choice(len(tris), size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    su = np.sqrt(r1)
    bary = np.stack([1.0 - su, su * (1.0 - r2), su * r2], axis=1)
    return np.einsum("nk,nkd->nd", bary, tris[face_idx])


@dataclass
class ChamferReport:
    mean: float
    median: float
    std: float
    n_samples: int
    direction: str
    unit_scale: float
    distances: np.ndarray = field(repr=False)
    per_vertex: np.ndarray = field(repr=False)

    def __post_init__(self):
        if min(self.mean, self.median, self.std) < 0:
            raise ValueError("chamfer statistics must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "mean": float(self.mean),
            "median": float(self.median),
            "std": float(self.std),
            "n_samples": int(self.n_samples),
            "direction": self.direction,
            "unit_scale": float(self.unit_scale),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def chamfer_stats(
    predicted: FaceMesh,
    ground_truth: FaceMesh,
    samples: int = 10000,
    seed: int = 0,
    symmetric: bool = False,
    unit_scale: float = 1.0,
) -> ChamferReport:
    """Point-to-surface chamfer, predicted -> GT by default.

    Distances are multiplied by unit_scale (e.g. 1000 for meshes in meters
    reported in millimeters). per_vertex holds, for every predicted vertex,
    its distance to the GT surface, for error-map export.
    """
    if len(predicted.vertices) == 0 or len(ground_truth.vertices) == 0:
        raise ValueError("meshes must be non-empty")
    rng = np.random.default_rng(seed)
    gt_bvh = TriangleBVH(ground_truth)
    pts = sample_surface(predicted, samples, rng)
    d = gt_bvh.distances(pts)
    if symmetric:
        pred_bvh = TriangleBVH(predicted)
        pts_b = sample_surface(ground_truth, samples, rng)
        d = np.concatenate([d, pred_bvh.distances(pts_b)])
    d = d * unit_scale
    per_vertex = gt_bvh.distances(predicted.vertices) * unit_scale
    return ChamferReport(
        mean=float(d.mean()),
        median=float(np.median(d)),
        std=float(d.std()),
        n_samples=len(d),
        direction="symmetric" if symmetric else "pred_to_gt",
        unit_scale=unit_scale,
        distances=d,
        per_vertex=per_vertex,
    )
