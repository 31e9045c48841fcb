"""Per-view prediction bundle: point map, UV image, camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CameraIntrinsics, CameraPose


@dataclass
class ViewPrediction:
    """One view's point map (H,W,3), UV image (H,W,2), and camera.

    valid_mask marks pixels whose UV entries are all finite; finite UVs must
    lie in [0,1]^2. Point-map validity is checked separately at fusion time.
    """

    point_map: np.ndarray
    uv_image: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose

    def __post_init__(self):
        self.point_map = np.asarray(self.point_map, dtype=np.float64)
        self.uv_image = np.asarray(self.uv_image, dtype=np.float64)
        if self.point_map.ndim != 3 or self.point_map.shape[2] != 3:
            raise ValueError(f"point_map must be (H, W, 3), got {self.point_map.shape}")
        if self.uv_image.ndim != 3 or self.uv_image.shape[2] != 2:
            raise ValueError(f"uv_image must be (H, W, 2), got {self.uv_image.shape}")
        if self.point_map.shape[:2] != self.uv_image.shape[:2]:
            raise ValueError("point_map and uv_image must share H, W")
        finite = np.isfinite(self.uv_image)
        vals = self.uv_image[finite]
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("finite UV entries must lie in [0, 1]^2")

    @property
    def shape(self) -> tuple[int, int]:
        return self.point_map.shape[:2]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.uv_image).all(axis=2)
