"""UV-image correspondence: per-vertex screen tracks and visibility flags.

For every template vertex we find the valid pixel whose predicted UV value
is closest (exact nearest neighbor, ties broken by lowest row-major pixel
index), record the achieved UV distance, and threshold the distances at a
per-view nearest-rank percentile to decide visibility.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mesh import TemplateMesh
from .views import ViewPrediction


@dataclass(frozen=True)
class CorrespondenceConfig:
    percentile: float = 70.0
    min_valid_pixels: int = 1

    def __post_init__(self):
        if not (0.0 < self.percentile <= 100.0):
            raise ValueError("percentile must be in (0, 100]")
        if self.min_valid_pixels < 1:
            raise ValueError("min_valid_pixels must be >= 1")


@dataclass
class TrackSet:
    """Screen tracks for all (view, vertex) pairs.

    tracks[i, j] is the (u, v) pixel-center coordinate of vertex j in view i;
    the entry is meaningful only where visibility[i, j]. nearest_distance
    holds the achieved UV distance (inf where lookup failed).
    """

    tracks: np.ndarray            # (V, N, 2) float64
    visibility: np.ndarray        # (V, N) bool
    nearest_distance: np.ndarray  # (V, N) float64
    epsilons: np.ndarray          # (V,) per-view visibility thresholds

    @property
    def n_views(self) -> int:
        return self.tracks.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.tracks.shape[1]

    @property
    def track_counts(self) -> np.ndarray:
        return self.visibility.sum(axis=0).astype(np.int64)

    def copy(self) -> "TrackSet":
        return TrackSet(
            tracks=self.tracks.copy(),
            visibility=self.visibility.copy(),
            nearest_distance=self.nearest_distance.copy(),
            epsilons=self.epsilons.copy(),
        )


class UVGridIndex:
    """Exact nearest-neighbor lookup over a view's valid UV pixels.

    Uniform bucket grid over the UV unit square with expanding ring search.
    Ties in UV distance are resolved to the lowest row-major pixel index,
    which makes the lookup deterministic.
    """

    def __init__(self, uv_image: np.ndarray, valid_mask: np.ndarray):
        h, w = valid_mask.shape
        flat_ids = np.nonzero(valid_mask.ravel())[0]
        self.n_valid = len(flat_ids)
        self.image_shape = (h, w)
        if self.n_valid == 0:
            return
        self.pixel_ids = flat_ids  # row-major, ascending
        self.points = uv_image.reshape(-1, 2)[flat_ids].astype(np.float64)
        self.ncells = int(np.clip(np.sqrt(self.n_valid), 1, 512))
        self.cell_size = 1.0 / self.ncells
        cells = np.clip((self.points * self.ncells).astype(np.int64), 0, self.ncells - 1)
        cell_keys = cells[:, 0] * self.ncells + cells[:, 1]
        order = np.argsort(cell_keys, kind="stable")  # preserves pixel order in cell
        self._order = order
        self._sorted_keys = cell_keys[order]
        self._starts = np.searchsorted(self._sorted_keys, np.arange(self.ncells * self.ncells))
        self._ends = np.searchsorted(self._sorted_keys, np.arange(self.ncells * self.ncells), side="right")

    def _cell_candidates(self, cu: int, cv: int) -> np.ndarray:
        key = cu * self.ncells + cv
        return self._order[self._starts[key]:self._ends[key]]

    def query(self, uv: np.ndarray) -> tuple[int, float]:
        """Returns (flat row-major pixel index, UV distance) of the nearest valid pixel."""
        q = np.asarray(uv, dtype=np.float64)
        nc = self.ncells
        cu = int(np.clip(q[0] * nc, 0, nc - 1))
        cv = int(np.clip(q[1] * nc, 0, nc - 1))
        best_d2 = np.inf
        best_pid = -1
        for ring in range(2 * nc + 2):
            # points in rings >= ring are at least (ring-1)*cell_size away
            if ring >= 2 and best_d2 < ((ring - 1) * self.cell_size) ** 2:
                break
            lo_u, hi_u = cu - ring, cu + ring
            lo_v, hi_v = cv - ring, cv + ring
            if lo_u < 0 and hi_u >= nc and lo_v < 0 and hi_v >= nc:
                break  # every grid cell already visited on earlier rings
            cells = []
            for u in range(max(lo_u, 0), min(hi_u, nc - 1) + 1):
                if u == lo_u or u == hi_u:
                    cells += [(u, v) for v in range(max(lo_v, 0), min(hi_v, nc - 1) + 1)]
                else:
                    if lo_v >= 0:
                        cells.append((u, lo_v))
                    if hi_v < nc:
                        cells.append((u, hi_v))
            cand = [self._cell_candidates(u, v) for (u, v) in cells]
            cand = [c for c in cand if len(c)]
            if not cand:
                continue
            idx = np.concatenate(cand)
            d = self.points[idx] - q
            d2 = d[:, 0] ** 2 + d[:, 1] ** 2
            pids = self.pixel_ids[idx]
            k = np.argmin(d2)
            dmin = d2[k]
            if dmin < best_d2:
                ties = pids[d2 == dmin]
                best_d2, best_pid = float(dmin), int(ties.min())
            elif dmin == best_d2 and best_pid >= 0:
                ties = pids[d2 == dmin]
                best_pid = min(best_pid, int(ties.min()))
        return best_pid, float(np.sqrt(best_d2))

    def query_many(self, uvs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        pids = np.empty(len(uvs), dtype=np.int64)
        dists = np.empty(len(uvs), dtype=np.float64)
        for k, q in enumerate(uvs):
            pids[k], dists[k] = self.query(q)
        return pids, dists


def build_uv_index(
    uv_image: np.ndarray, valid_mask: np.ndarray, config: CorrespondenceConfig | None = None
) -> UVGridIndex | None:
    """Spatial index over a view's valid pixels; None when too few are valid."""
    config = config or CorrespondenceConfig()
    index = UVGridIndex(uv_image, valid_mask)
    if index.n_valid < config.min_valid_pixels:
        return None
    return index


def lookup_tracks(
    view: ViewPrediction, template: TemplateMesh, config: CorrespondenceConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex (q, nearest UV distance) for one view.

    q rows are (u, v) pixel centers of the argmin pixel. When the view has
    too few valid pixels, all distances are +inf and q is zeros.
    """
    n = template.n_vertices
    index = build_uv_index(view.uv_image, view.valid_mask, config)
    if index is None:
        return np.zeros((n, 2)), np.full(n, np.inf)
    pids, dists = index.query_many(template.uv)
    h, w = view.shape
    rows, cols = np.divmod(pids, w)
    q = np.stack([cols.astype(np.float64), rows.astype(np.float64)], axis=1)
    return q, dists


def compute_visibility(
    nearest_distances: np.ndarray, config: CorrespondenceConfig | None = None
) -> tuple[float, np.ndarray]:
    """Per-view threshold and flags.

    epsilon is the nearest-rank percentile (ceil(p/100 * n)-th order
    statistic) of the finite distances; a vertex is visible iff its distance
    is strictly below epsilon. No finite distances -> everything invisible.
    """
    config = config or CorrespondenceConfig()
    d = np.asarray(nearest_distances, dtype=np.float64)
    finite = d[np.isfinite(d)]
    if finite.size == 0:
        return np.nan, np.zeros(d.shape, dtype=bool)
    k = int(np.ceil(config.percentile / 100.0 * finite.size))
    eps = float(np.sort(finite)[k - 1])
    return eps, d < eps


def build_tracks(
    views: list[ViewPrediction],
    template: TemplateMesh,
    config: CorrespondenceConfig | None = None,
    threads: int = 1,
) -> TrackSet:
    """Tracks + visibility for all views (per-view work is independent)."""
    config = config or CorrespondenceConfig()
    n_views, n = len(views), template.n_vertices
    tracks = np.zeros((n_views, n, 2))
    dists = np.full((n_views, n), np.inf)
    vis = np.zeros((n_views, n), dtype=bool)
    eps = np.full(n_views, np.nan)

    def work(i: int):
        q, d = lookup_tracks(views[i], template, config)
        e, v = compute_visibility(d, config)
        return i, q, d, e, v

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n_views)))
    else:
        results = [work(i) for i in range(n_views)]
    for i, q, d, e, v in results:
        tracks[i], dists[i], eps[i], vis[i] = q, d, e, v
    return TrackSet(tracks=tracks, visibility=vis, nearest_distance=dists, epsilons=eps)
