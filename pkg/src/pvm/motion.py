"""Camera-rotation compensation.

Axes follow the image plane: x right, y down, z along the optical axis.
A pan/tilt move from pose 1 to pose 2 changes camera coordinates by

    T = R_x(tilt2) @ R_y(pan2 - pan1) @ R_x(tilt1)^-1

so a scene point with pose-1 camera coordinates v appears at T v in the
pose-2 camera.  Warping a frame between the two viewpoints is then an
affine map on focal-normalised pixel coordinates followed by a
perspective divide.  Pixel positions are rounded (half away from zero),
never interpolated, and destinations whose source falls outside the frame
replicate the nearest edge pixel, so every output value is a copy of an
input value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PoseAngles:
    """Pan/tilt of the rig, radians.  Tilt must stay short of gimbal lock."""

    pan: float
    tilt: float

    def __post_init__(self):
        if not (math.isfinite(self.pan) and math.isfinite(self.tilt)):
            raise ValueError("pose angles must be finite")
        if abs(self.tilt) >= math.pi / 2:
            raise ValueError(f"|tilt| must be < pi/2, got {self.tilt}")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal length in pixels, principal point, frame size."""

    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the frame")

    @classmethod
    def from_fov(cls, width: int, height: int,
                 fov_deg: float = 75.0) -> "CameraIntrinsics":
        """Derive the focal length from the horizontal field of view."""
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(focal_px=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)


def rot_x(alpha: float) -> np.ndarray:
    """Rotation about the x axis; note the +sin above the diagonal."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, c, s],
                     [0.0, -s, c]])


def rot_y(alpha: float) -> np.ndarray:
    """Rotation about the y axis; note the +sin in the first row."""
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def camera_transform(p1: PoseAngles, p2: PoseAngles) -> np.ndarray:
    """Rotation taking pose-1 camera coordinates to pose-2 camera coordinates."""
    return rot_x(p2.tilt) @ rot_y(p2.pan - p1.pan) @ rot_x(p1.tilt).T


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, halves away from zero."""
    x = np.asarray(x)
    return np.trunc(x + np.copysign(0.5, x))


_Z_EPS = 1e-12
_FAR = 1e9


def warp_frame(frame: np.ndarray, p1: PoseAngles, p2: PoseAngles,
               k: CameraIntrinsics) -> np.ndarray:
    """Re-view a frame captured at pose 1 from pose 2.

    Destination-driven: every output pixel pulls its value from the source
    pixel the inverse rotation lands on, which guarantees a complete output
    (no holes).  Sources behind the camera (z' <= 0) are pushed out of
    frame along their ray direction and take edge values like any other
    out-of-view source.
    """
    frame = np.asarray(frame)
    if frame.shape[:2] != (k.height, k.width):
        raise ValueError(f"frame has shape {frame.shape}, expected "
                         f"({k.height}, {k.width}, ...)")
    m = camera_transform(p2, p1)  # destination pose -> source pose
    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height))
    x = (u - k.cx) / k.focal_px
    y = (v - k.cy) / k.focal_px
    sx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    sy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    sz = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    behind = sz <= _Z_EPS
    sz = np.where(behind, 1.0, sz)
    px = k.focal_px * sx / sz + k.cx
    py = k.focal_px * sy / sz + k.cy
    px = np.where(behind, np.copysign(_FAR, sx) + k.cx, px)
    py = np.where(behind, np.copysign(_FAR, sy) + k.cy, py)
    ix = np.clip(round_half_away(px), 0, k.width - 1).astype(np.int64)
    iy = np.clip(round_half_away(py), 0, k.height - 1).astype(np.int64)
    return frame[iy, ix]


def compensate_prediction(pending_prediction: np.ndarray, pose_prev: PoseAngles,
                          pose_now: PoseAngles, k: CameraIntrinsics) -> np.ndarray:
    """Warp a prediction made at the previous pose into the current pose.

    Applied to the network's pending level-0 prediction (and, by the
    caller, to its level-0 signal memory) before the next frame is scored,
    so prediction error reflects the scene rather than the camera's own
    motion.  A stationary camera reduces this to the identity.
    """
    return warp_frame(pending_prediction, pose_prev, pose_now, k)
