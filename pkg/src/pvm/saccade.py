"""Error-driven gaze control.

The controller scans the per-pixel prediction-error map of the lowest
level with a fixed-size sliding window; the window with the largest total
squared error becomes the equilibrium point of a damped spring driving
the gaze, but only when that total exceeds an adaptive threshold (a
running average of the windowed maximum).  As predictions improve the
threshold falls and gaze becomes more sensitive to error, and vice versa.

Gaze lives on a fixed gnomonic plane anchored at the rig's home pose:
environment point (gx, gy) corresponds to pan = atan((gx-cx)/f) and
tilt = atan((gy-cy)/f).  Working in that plane keeps the oscillator
independent of the camera's own motion; the closed loop servos the
camera to the gaze, so the current pose is always implied by the gaze.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .motion import CameraIntrinsics, PoseAngles

PAN_LIMIT = math.pi / 2      # rig range: pan +/-90 degrees
TILT_LIMIT = math.pi / 4     # rig range: tilt +/-45 degrees
DEFAULT_DT = 1.0 / 120.0     # one frame at the rig's 120 fps


@dataclass(frozen=True)
class SaccadeParams:
    intrinsics: CameraIntrinsics
    window: tuple[int, int] = (16, 16)   # (w, h) pixels
    stiffness: float = 4.0               # spring constant, 1/s^2
    damping: float = 4.5                 # slightly overdamped with the above
    noise_sigma: float = 1.5             # px / sqrt(s) of white acceleration noise
    threshold_decay: float = 0.99
    pan_limit: float = PAN_LIMIT
    tilt_limit: float = TILT_LIMIT

    def __post_init__(self):
        if min(self.stiffness, self.damping, self.noise_sigma,
               self.threshold_decay) < 0:
            raise ValueError("saccade parameters must be non-negative")
        w, h = self.window
        if w < 1 or h < 1:
            raise ValueError("window must be at least 1x1")


@dataclass
class SaccadeState:
    gaze: tuple[float, float]          # environment-plane pixels
    velocity: tuple[float, float]      # pixels per second
    equilibrium: tuple[float, float]
    threshold_avg: float
    rng: np.random.Generator
    triggered: bool = False            # last step moved the equilibrium gate

    @classmethod
    def at_home(cls, k: CameraIntrinsics, rng: np.random.Generator,
                threshold_init: float = 0.0) -> "SaccadeState":
        home = (k.cx, k.cy)
        return cls(gaze=home, velocity=(0.0, 0.0), equilibrium=home,
                   threshold_avg=float(threshold_init), rng=rng)


def max_error_window(errmap: np.ndarray, window: tuple[int, int]):
    """Position (x, y) of the window with the largest error sum, and the sum.

    Ties break to the smallest row, then the smallest column.  A summed-
    area table finds the near-maximal candidates in O(pixels); their totals
    are then recomputed with the plain window reduction, so the returned
    position and total are exactly what an exhaustive scan would produce.
    """
    errmap = np.asarray(errmap, dtype=np.float64)
    h_map, w_map = errmap.shape
    w, h = window
    if w > w_map or h > h_map:
        raise ValueError(f"window {window} larger than map {(w_map, h_map)}")

    lo, hi = errmap.min(), errmap.max()
    if lo == hi:
        # Constant map: every window ties; the scan would stop at (0, 0).
        return (0, 0), float(errmap[0:h, 0:w].sum())

    sat = np.zeros((h_map + 1, w_map + 1))
    sat[1:, 1:] = errmap.cumsum(axis=0).cumsum(axis=1)
    sums = (sat[h:, w:] - sat[:-h, w:] - sat[h:, :-w] + sat[:-h, :-w])
    slack = 64.0 * np.finfo(np.float64).eps * (h_map + w_map) * abs(sat[-1, -1])
    cand_y, cand_x = np.nonzero(sums >= sums.max() - slack)

    best_total = -np.inf
    best_pos = (0, 0)
    for y, x in zip(cand_y.tolist(), cand_x.tolist()):  # row-major order
        total = float(errmap[y:y + h, x:x + w].sum())
        if total > best_total:
            best_total = total
            best_pos = (x, y)
    return best_pos, best_total


def gaze_to_pose(gaze: tuple[float, float], k: CameraIntrinsics,
                 pan_limit: float = PAN_LIMIT,
                 tilt_limit: float = TILT_LIMIT) -> PoseAngles:
    """Pose that centres an environment-plane point, clamped to the rig range."""
    pan = math.atan2(gaze[0] - k.cx, k.focal_px)
    tilt = math.atan2(gaze[1] - k.cy, k.focal_px)
    return PoseAngles(pan=float(np.clip(pan, -pan_limit, pan_limit)),
                      tilt=float(np.clip(tilt, -tilt_limit, tilt_limit)))


def gaze_from_pose(pose: PoseAngles, k: CameraIntrinsics) -> tuple[float, float]:
    """Inverse of gaze_to_pose (for poses inside the rig range)."""
    return (k.cx + k.focal_px * math.tan(pose.pan),
            k.cy + k.focal_px * math.tan(pose.tilt))


def saccade_step(s: SaccadeState, errmap: np.ndarray, params: SaccadeParams,
                 dt: float = DEFAULT_DT) -> SaccadeState:
    """One controller step over a freshly computed error map.

    Updates the running threshold, retargets the equilibrium when the
    windowed maximum exceeds it, then integrates the noisy damped spring
    with semi-implicit Euler:

        v <- v + dt * (-k (gaze - eq) - c v) + sigma sqrt(dt) eta
        gaze <- gaze + dt * v
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    (wx, wy), total = max_error_window(errmap, params.window)
    lam = params.threshold_decay
    threshold = lam * s.threshold_avg + (1.0 - lam) * total

    eq = s.equilibrium
    triggered = total > threshold
    if triggered:
        k = params.intrinsics
        # Window centre, mapped to the pose that would centre it, then back
        # to the environment plane.  Under the pose-transform convention in
        # use, panning by +d moves frame content toward +x, so the content
        # at screen offset +x lies at pose angle (current - atan(x / f)).
        wcx = wx + (params.window[0] - 1) / 2.0
        wcy = wy + (params.window[1] - 1) / 2.0
        pose = gaze_to_pose(s.gaze, k, params.pan_limit, params.tilt_limit)
        pan = pose.pan - math.atan2(wcx - k.cx, k.focal_px)
        tilt = pose.tilt - math.atan2(wcy - k.cy, k.focal_px)
        pan = float(np.clip(pan, -params.pan_limit, params.pan_limit))
        tilt = float(np.clip(tilt, -params.tilt_limit, params.tilt_limit))
        eq = gaze_from_pose(PoseAngles(pan, tilt), k)

    if params.noise_sigma > 0.0:
        eta = s.rng.standard_normal(2)
        nx, ny = params.noise_sigma * math.sqrt(dt) * eta
    else:
        nx = ny = 0.0
    kx, cx = params.stiffness, params.damping
    vx = s.velocity[0] + dt * (-kx * (s.gaze[0] - eq[0]) - cx * s.velocity[0]) + nx
    vy = s.velocity[1] + dt * (-kx * (s.gaze[1] - eq[1]) - cx * s.velocity[1]) + ny
    gaze = (s.gaze[0] + dt * vx, s.gaze[1] + dt * vy)
    return replace(s, gaze=gaze, velocity=(vx, vy), equilibrium=eq,
                   threshold_avg=threshold, triggered=triggered)
