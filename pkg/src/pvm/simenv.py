"""Simulated pan-tilt rig.

A static scene is stored as an equirectangular panorama (columns span the
full 360 degrees of pan, rows span the tilt range).  `render` produces the
pinhole view at a commanded pose by rotating each pixel ray with the same
pose transform the motion module uses, so renders and warps are consistent
by construction.  Trajectory generators and a binary frame+pose dataset
format replace the physical capture pipeline; pose/frame pairing is exact
in simulation.

Dataset file layout (little-endian):

    magic  b"PVMD" | format version u16 | frame W u16 | frame H u16
    record count u64
    per record: frame index u64 | pan f64 | tilt f64 (radians)
                W*H*3 bytes, 8-bit per channel, row-major RGB
                CRC-32 (u32) of the record bytes above

Frames dumped for eyeballing use the binary portable pixmap format (P6).
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .motion import CameraIntrinsics, PoseAngles, camera_transform

log = logging.getLogger(__name__)

PAN_LIMIT = math.pi / 2
TILT_LIMIT = math.pi / 4

DATASET_MAGIC = b"PVMD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHQ")
_REC_HEAD = struct.Struct("<Qdd")
_CRC = struct.Struct("<I")


class DatasetError(Exception):
    """Base class for dataset file problems."""


class DatasetFormatError(DatasetError):
    """The file does not start with the dataset magic."""


class DatasetVersionError(DatasetError):
    """The file uses an unsupported format version."""


class DatasetTruncatedError(DatasetError):
    """The file ends before the declared records do."""


class DatasetChecksumError(DatasetError):
    """A record's CRC-32 does not match its payload."""


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass
class PanoramaScene:
    """Equirectangular environment image, values in [0, 1].

    Columns cover pan in [-pi, pi) (wrapping); rows cover tilt in
    [-tilt_half, +tilt_half].
    """

    image: np.ndarray
    tilt_half: float = math.pi / 2

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("panorama must be (H, W, 3)")

    @classmethod
    def from_ppm(cls, path) -> "PanoramaScene":
        return cls(read_ppm(path))


def checkerboard_panorama(width: int = 1024, height: int = 512,
                          square: int = 32) -> PanoramaScene:
    """Black/white checkerboard; handy for pinning geometric behaviour."""
    yy, xx = np.mgrid[0:height, 0:width]
    board = ((xx // square + yy // square) % 2).astype(np.float64)
    return PanoramaScene(np.repeat(board[:, :, None], 3, axis=2))


def gradient_panorama(width: int = 1024, height: int = 512) -> PanoramaScene:
    """Smooth horizontal hue ramp over a vertical brightness ramp."""
    xx = np.linspace(0.0, 1.0, width)[None, :]
    yy = np.linspace(0.0, 1.0, height)[:, None]
    img = np.empty((height, width, 3))
    img[:, :, 0] = 0.5 + 0.5 * np.sin(2 * np.pi * xx) * np.ones_like(yy)
    img[:, :, 1] = yy * np.ones_like(xx)
    img[:, :, 2] = 0.5 + 0.5 * np.cos(2 * np.pi * xx) * (1.0 - yy)
    return PanoramaScene(img)


def blob_panorama(width: int = 1024, height: int = 512, n_blobs: int = 40,
                  seed: int = 0) -> PanoramaScene:
    """Soft textured blobs on a mid-grey ground; a generic 'room'."""
    rng = np.random.default_rng(seed)
    img = np.full((height, width, 3), 0.5)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(n_blobs):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0.15 * height, 0.85 * height)
        r = rng.uniform(0.02, 0.08) * width
        colour = rng.uniform(0.0, 1.0, 3)
        dx = np.minimum(np.abs(xx - cx), width - np.abs(xx - cx))  # pan wraps
        d2 = dx * dx + (yy - cy) ** 2
        mask = np.exp(-d2 / (2 * r * r))
        img += mask[:, :, None] * (colour[None, None, :] - img)
    return PanoramaScene(np.clip(img, 0.0, 1.0))


def two_object_panorama(width: int = 1024, height: int = 512,
                        separation_deg: float = 50.0,
                        seed: int = 0) -> PanoramaScene:
    """Flat background with two high-contrast textured patches.

    The patches sit at +/- separation/2 of pan at zero tilt: the classic
    stage for gaze bouncing between two fixation points.
    """
    rng = np.random.default_rng(seed)
    img = np.full((height, width, 3), 0.45)
    half = math.radians(separation_deg) / 2.0
    patch = int(0.05 * width)
    for pan in (-half, half):
        cx = int((pan + math.pi) / (2 * math.pi) * width)
        cy = height // 2
        tex = rng.uniform(0.0, 1.0, (2 * patch, 2 * patch, 3))
        img[cy - patch:cy + patch, cx - patch:cx + patch] = tex
    return PanoramaScene(img)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render(scene: PanoramaScene, pose: PoseAngles,
           k: CameraIntrinsics) -> np.ndarray:
    """Deterministic pinhole view of the panorama at a pose.

    Each pixel ray is rotated into the world frame with the inverse pose
    rotation and sampled nearest-neighbour.  Poses beyond the panorama's
    tilt span are clamped (and logged) rather than rejected.
    """
    tilt_max = scene.tilt_half - 1e-9
    if abs(pose.tilt) > tilt_max:
        log.warning("pose tilt %.4f outside scene span %.4f; clamping",
                    pose.tilt, scene.tilt_half)
        pose = PoseAngles(pose.pan, float(np.clip(pose.tilt, -tilt_max, tilt_max)))

    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height))
    rays = np.stack([(u - k.cx) / k.focal_px,
                     (v - k.cy) / k.focal_px,
                     np.ones_like(u, dtype=np.float64)])
    rot = camera_transform(PoseAngles(0.0, 0.0), pose)   # world -> camera
    d = np.einsum("ji,jhw->ihw", rot, rays)              # camera -> world
    pan = np.arctan2(-d[0], d[2])
    tilt = np.arctan2(-d[1], np.hypot(d[0], d[2]))

    ph, pw = scene.image.shape[:2]
    col = np.floor((pan + math.pi) / (2 * math.pi) * pw).astype(np.int64) % pw
    row = np.floor((tilt + scene.tilt_half) / (2 * scene.tilt_half) * ph)
    row = np.clip(row, 0, ph - 1).astype(np.int64)
    return scene.image[row, col]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AxisProfile:
    """One axis of motion: angle as a pure function of the step index."""

    family: str            # "oscillation" | "reflective" | "resetting"
    amplitude: float       # radians
    period: float          # steps per cycle
    phase: float           # cycles
    direction: int         # +1 or -1 ("in reverse")

    def angle_at(self, step: int) -> float:
        t = self.direction * step / self.period + self.phase
        frac = t - math.floor(t)
        if self.family == "oscillation":
            return self.amplitude * math.sin(2 * math.pi * t)
        if self.family == "reflective":
            return self.amplitude * (2.0 * abs(2.0 * frac - 1.0) - 1.0)
        if self.family == "resetting":
            return self.amplitude * (2.0 * frac - 1.0)
        raise ValueError(f"unknown family {self.family!r}")


@dataclass(frozen=True)
class Trajectory:
    """A pan profile paired with a tilt profile."""

    name: str
    pan: AxisProfile
    tilt: AxisProfile

    def pose_at(self, step: int) -> PoseAngles:
        return PoseAngles(self.pan.angle_at(step), self.tilt.angle_at(step))


_FAMILIES = ("oscillation", "reflective", "resetting")


def _axis_profiles(count: int, limit: float, rng: np.random.Generator,
                   period_range: tuple[float, float],
                   amplitude_frac: tuple[float, float]) -> list[AxisProfile]:
    profiles = []
    for i in range(count):
        lo, hi = period_range
        period = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        amp = rng.uniform(*amplitude_frac) * limit
        profiles.append(AxisProfile(
            family=_FAMILIES[i % len(_FAMILIES)],
            amplitude=amp,
            period=period,
            phase=float(rng.uniform(0.0, 1.0)),
            direction=1 if i % 2 == 0 else -1,
        ))
    return profiles


def make_trajectories(count_pan: int, count_tilt: int, seed: int = 0,
                      period_range: tuple[float, float] = (30.0, 300.0),
                      amplitude_frac: tuple[float, float] = (0.2, 0.8),
                      pan_limit: float = PAN_LIMIT,
                      tilt_limit: float = TILT_LIMIT) -> list[Trajectory]:
    """Cross product of pan and tilt 1-D profiles (count_pan * count_tilt).

    Profiles cycle through the three families at seeded rates, amplitudes,
    phases and directions; every generated pose stays inside the rig range
    because amplitudes never exceed it.  Pure in all arguments.
    """
    if count_pan < 1 or count_tilt < 1:
        raise ValueError("profile counts must be >= 1")
    rng = np.random.default_rng(seed)
    pans = _axis_profiles(count_pan, pan_limit, rng, period_range, amplitude_frac)
    tilts = _axis_profiles(count_tilt, tilt_limit, rng, period_range, amplitude_frac)
    return [Trajectory(name=f"pan{i:02d}_tilt{j:02d}", pan=p, tilt=t)
            for i, p in enumerate(pans) for j, t in enumerate(tilts)]


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------

@dataclass
class DatasetRecord:
    index: int
    pose: PoseAngles
    frame: np.ndarray   # (H, W, 3) float64 in [0, 1]


def frame_to_bytes(frame: np.ndarray) -> bytes:
    q = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    return q.tobytes()


def write_dataset(path, records: Sequence[tuple[int, PoseAngles, np.ndarray]],
                  width: int, height: int) -> None:
    """Write one set file; records are (index, pose, frame) triples."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION,
                              width, height, len(records)))
        for index, pose, frame in records:
            if frame.shape != (height, width, 3):
                raise ValueError(f"frame {index} has shape {frame.shape}, "
                                 f"expected {(height, width, 3)}")
            body = _REC_HEAD.pack(index, pose.pan, pose.tilt) + frame_to_bytes(frame)
            fh.write(body)
            fh.write(_CRC.pack(zlib.crc32(body)))


def read_dataset(path) -> Iterator[DatasetRecord]:
    """Stream records from one set file, validating structure and checksums."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise DatasetTruncatedError(f"{path}: file shorter than the header")
        magic, version, width, height, count = _HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DatasetVersionError(
                f"{path}: version {version}, expected {DATASET_VERSION}")
        body_len = _REC_HEAD.size + width * height * 3
        for i in range(count):
            blob = fh.read(body_len + _CRC.size)
            if len(blob) < body_len + _CRC.size:
                raise DatasetTruncatedError(
                    f"{path}: record {i} truncated ({len(blob)} of "
                    f"{body_len + _CRC.size} bytes)")
            body, crc_bytes = blob[:body_len], blob[body_len:]
            (crc,) = _CRC.unpack(crc_bytes)
            if zlib.crc32(body) != crc:
                raise DatasetChecksumError(f"{path}: record {i} checksum mismatch")
            index, pan, tilt = _REC_HEAD.unpack(body[:_REC_HEAD.size])
            pixels = np.frombuffer(body, dtype=np.uint8, offset=_REC_HEAD.size)
            frame = pixels.reshape(height, width, 3).astype(np.float64) / 255.0
            yield DatasetRecord(index=index, pose=PoseAngles(pan, tilt), frame=frame)


def record_dataset(scene: PanoramaScene, trajectories: Sequence[Trajectory],
                   sets: int, frames_per_set: int, seed: int, path,
                   k: CameraIntrinsics | None = None,
                   frame_size: tuple[int, int] = (128, 96)) -> list[Path]:
    """Render `sets` files of `frames_per_set` frame/pose records each.

    Each set samples one trajectory uniformly (seeded) and follows it from
    step 0.  Output files are `set_0000.pvmd`... under `path`.  Bytes are a
    pure function of the arguments.
    """
    if k is None:
        k = CameraIntrinsics.from_fov(*frame_size)
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = []
    for s in range(sets):
        traj = trajectories[int(rng.integers(len(trajectories)))]
        records = []
        for i in range(frames_per_set):
            pose = traj.pose_at(i)
            records.append((i, pose, render(scene, pose, k)))
        dest = out_dir / f"set_{s:04d}.pvmd"
        write_dataset(dest, records, k.width, k.height)
        written.append(dest)
    return written


def dataset_files(path) -> list[Path]:
    """Set files under a directory, in deterministic (sorted) order."""
    root = Path(path)
    if root.is_file():
        return [root]
    return sorted(root.glob("*.pvmd"))


# ---------------------------------------------------------------------------
# PPM (P6) dumps
# ---------------------------------------------------------------------------

def write_ppm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    h, w = frame.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(frame_to_bytes(frame))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h * 3)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
