"""Scene manifest: a JSON document tying per-view grid files to cameras.

Cameras are stored as a 3x3 row-major world->camera rotation plus a
3-vector translation; the expected convention is the first camera's frame.
Floats survive the JSON round trip exactly (shortest round-trip decimal
serialization).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraIntrinsics, CameraPose
from .gridio import read_grid
from .mesh import TemplateMesh
from .meshio import load_template_obj
from .views import ViewPrediction


class ManifestError(ValueError):
    pass


@dataclass
class SceneData:
    views: list[ViewPrediction]
    template: TemplateMesh
    template_vertices: np.ndarray
    landmarks_path: Path | None
    manifest_dir: Path


def save_manifest(
    path: str | Path,
    entries: list[dict],
    template: str,
    landmarks: str | None = None,
) -> None:
    """entries: per view {point_map, uv_image, intrinsics, rotation, translation}."""
    doc = {
        "convention": "x_cam = R @ x_world + t; world frame = first camera",
        "template": template,
        "views": [],
    }
    if landmarks is not None:
        doc["landmarks"] = landmarks
    for e in entries:
        k = e["intrinsics"]
        if isinstance(k, CameraIntrinsics):
            k = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}
        doc["views"].append(
            {
                "point_map": e["point_map"],
                "uv_image": e["uv_image"],
                "intrinsics": {key: float(k[key]) for key in ("fx", "fy", "cx", "cy")},
                "rotation": np.asarray(e["rotation"], dtype=np.float64).tolist(),
                "translation": np.asarray(e["translation"], dtype=np.float64).tolist(),
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_manifest(path: str | Path) -> SceneData:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from e
    for key in ("views", "template"):
        if key not in doc:
            raise ManifestError(f"{path}: missing '{key}'")
    if len(doc["views"]) < 2:
        raise ManifestError(f"{path}: need at least 2 views, found {len(doc['views'])}")
    base = path.parent
    template, template_vertices = load_template_obj(base / doc["template"])
    views = []
    for i, entry in enumerate(doc["views"]):
        try:
            pm = read_grid(base / entry["point_map"]).astype(np.float64)
            uv = read_grid(base / entry["uv_image"]).astype(np.float64)
            k = entry["intrinsics"]
            intr = CameraIntrinsics(fx=k["fx"], fy=k["fy"], cx=k["cx"], cy=k["cy"])
            pose = CameraPose.from_matrix(
                np.asarray(entry["rotation"], dtype=np.float64),
                np.asarray(entry["translation"], dtype=np.float64),
            )
        except KeyError as e:
            raise ManifestError(f"{path}: view {i} missing field {e}") from e
        if pm.shape[2] != 3:
            raise ManifestError(f"{path}: view {i} point map must have 3 channels")
        if uv.shape[2] != 2:
            raise ManifestError(f"{path}: view {i} UV image must have 2 channels")
        views.append(ViewPrediction(point_map=pm, uv_image=uv, intrinsics=intr, pose=pose))
    lm = doc.get("landmarks")
    return SceneData(
        views=views,
        template=template,
        template_vertices=template_vertices,
        landmarks_path=(base / lm) if lm else None,
        manifest_dir=base,
    )
