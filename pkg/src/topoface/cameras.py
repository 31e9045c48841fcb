"""Pinhole camera model and axis-angle rotation utilities.

Convention used throughout the package:

* world -> camera:  x_cam = R @ x_world + t
* projection:       u = fx * X/Z + cx,  v = fy * Y/Z + cy   (pixels)
* pixel (row r, col c) has screen coordinate (u, v) = (c, r); integer
  coordinates are pixel centers.

The world frame is expected to be the frame of the first camera (R = I,
t = 0), but nothing below depends on it.

Rotations are stored and optimized as 3-vector axis-angle; conversion to
matrices uses Rodrigues' formula with a series expansion below 1e-8 rad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


class BehindCameraError(ValueError):
    """Raised when a point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.isfinite([self.fx, self.fy, self.cx, self.cy]).all():
            raise ValueError("intrinsics must be finite")

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def as_array(self) -> np.ndarray:
        """(fx, fy, cx, cy) as a length-4 vector."""
        return np.array([self.fx, self.fy, self.cx, self.cy])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(rvec: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; series expansion for angles below 1e-8 rad."""
    rvec = np.asarray(rvec, dtype=np.float64)
    theta2 = float(rvec @ rvec)
    K = skew(rvec)
    if theta2 < _SMALL_ANGLE**2:
        # sin(t)/t ~ 1 - t^2/6,  (1-cos(t))/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_from_axis_angle`; returns angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        if axis[k] == 0.0:
            raise ValueError("cannot extract axis from rotation")
        axis = B[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        # disambiguate the residual sign with the (tiny) skew part
        if w @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def so3_right_jacobian(rvec: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): d/d(delta) of exp(rvec + delta) pulled back.

    Jr = I - (1-cos t)/t^2 K + (t - sin t)/t^3 K^2, K = skew(rvec).
    """
    rvec = np.asarray(rvec, dtype=np.float64)
    theta2 = float(rvec @ rvec)
    K = skew(rvec)
    if theta2 < _SMALL_ANGLE**2:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) - b * K + c * (K @ K)


@dataclass
class CameraPose:
    """World->camera rigid transform, parametrized by axis-angle + translation."""

    rvec: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.rvec = np.asarray(self.rvec, dtype=np.float64).reshape(3).copy()
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "CameraPose":
        R = np.asarray(R, dtype=np.float64)
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-8 or abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError(f"rotation is not orthonormal with det +1 (err={err:.3g})")
        return cls(rvec=axis_angle_from_rotation(R), t=t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(rvec=np.zeros(3), t=np.zeros(3))

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_axis_angle(self.rvec)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply world->camera to one point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.t

    def copy(self) -> "CameraPose":
        return CameraPose(rvec=self.rvec.copy(), t=self.t.copy())


def project(intrinsics: CameraIntrinsics, pose: CameraPose, point: np.ndarray) -> np.ndarray:
    """Project a single world point to (u, v) pixels.

    Raises BehindCameraError for non-positive depth; the caller decides
    whether to drop the residual or abort.
    """
    x, y, z = pose.transform(np.asarray(point, dtype=np.float64).reshape(3))
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive camera depth z={z:.6g}")
    return np.array([intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy])


def project_points(
    intrinsics: CameraIntrinsics, pose: CameraPose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batch projection. Returns ((N,2) pixels, (N,) depths); no depth check."""
    cam = pose.transform(np.atleast_2d(points))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=1), z
