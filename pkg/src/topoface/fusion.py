"""Visibility-weighted fusion of per-view point maps into one cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import TrackSet
from .mesh import FaceMesh, TemplateMesh
from .views import ViewPrediction


@dataclass
class TopologizedCloud:
    """Fused per-vertex positions sharing the template's connectivity.

    Vertices without any surviving track sit exactly at the origin.
    """

    points: np.ndarray            # (N, 3)
    constrained_mask: np.ndarray  # (N,) bool, true iff track_counts >= 1
    track_counts: np.ndarray      # (N,) int


def fuse_initial(
    views: list[ViewPrediction], tracks: TrackSet
) -> tuple[TopologizedCloud, TrackSet]:
    """Average each vertex's tracked point-map samples over visible views.

    A visible track whose point-map sample is non-finite is demoted to
    invisible (and excluded from the average); the returned TrackSet carries
    the adjusted visibility. Vertices left with no views fall back to the
    origin.
    """
    n_views, n = tracks.n_views, tracks.n_vertices
    if len(views) != n_views:
        raise ValueError(f"{len(views)} views but tracks cover {n_views}")
    vis = tracks.visibility.copy()
    sums = np.zeros((n, 3))
    for i, view in enumerate(views):
        j = np.nonzero(vis[i])[0]
        if j.size == 0:
            continue
        cols = tracks.tracks[i, j, 0].astype(np.int64)
        rows = tracks.tracks[i, j, 1].astype(np.int64)
        h, w = view.shape
        if cols.min() < 0 or cols.max() >= w or rows.min() < 0 or rows.max() >= h:
            raise ValueError(f"view {i}: visible track outside image bounds")
        samples = view.point_map[rows, cols]
        ok = np.isfinite(samples).all(axis=1)
        vis[i, j[~ok]] = False
        sums[j[ok]] += samples[ok]
    counts = vis.sum(axis=0).astype(np.int64)
    points = np.zeros((n, 3))
    has = counts > 0
    points[has] = sums[has] / counts[has, None]
    cloud = TopologizedCloud(points=points, constrained_mask=has, track_counts=counts)
    updated = TrackSet(
        tracks=tracks.tracks.copy(),
        visibility=vis,
        nearest_distance=tracks.nearest_distance.copy(),
        epsilons=tracks.epsilons.copy(),
    )
    return cloud, updated


def connect_mesh(cloud: TopologizedCloud, template: TemplateMesh) -> FaceMesh:
    """Attach the template's connectivity to the cloud's positions."""
    if cloud.points.shape[0] != template.n_vertices:
        raise ValueError(
            f"cloud has {cloud.points.shape[0]} points, template has {template.n_vertices} vertices"
        )
    return FaceMesh(vertices=cloud.points.copy(), faces=template.faces.copy(), uv=template.uv.copy())
