"""Experiment orchestration: config, training, evaluation, demo, persistence.

A run is described by a flat key=value config (every field has a CLI flag
of the same name).  Training streams recorded frame/pose sets through the
hierarchy; with motion integration on, the pending prediction and the
level-0 signal memory are warped from the previous pose into the current
one before each step, and the training targets are the current frame
warped back into the previous pose, so both the error signal and the
gradient compare like with like.

Metrics are plain CSV, one row per frame.  Checkpoints are versioned,
checksummed binary files holding every parameter and recurrent-state
array at 32-bit precision plus the RNG state and a config echo.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .hierarchy import (FoveaSpec, Hierarchy, HierarchySpec, NumericError)
from .motion import CameraIntrinsics, PoseAngles, compensate_prediction, warp_frame
from .saccade import SaccadeParams, SaccadeState, gaze_to_pose, saccade_step
from .simenv import (PanoramaScene, blob_panorama, checkerboard_panorama,
                     dataset_files, gradient_panorama, read_dataset, render,
                     two_object_panorama)


class ConfigError(Exception):
    """Bad or inconsistent run configuration."""


class DataError(Exception):
    """Missing or mismatched datasets."""


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointSpecError(CheckpointError):
    """Checkpoint was produced by a differently shaped hierarchy."""


_SCENES = {
    "blobs": blob_panorama,
    "checker": checkerboard_panorama,
    "gradient": gradient_panorama,
    "two-object": two_object_panorama,
}


@dataclass
class RunConfig:
    """Everything a run needs; flat so files and flags stay 1:1."""

    level_dims: str = "16x12,8x6,4x3,1x1"
    hidden_size: int = 5
    tile: str = "2x2"
    fovea_region: str = ""          # "x,y,w,h" in level-0 cells, empty = none
    fovea_factor: str = "2"         # "f" or "fx x fy" ("2" / "2x2")
    topmost_broadcast: bool = True
    tau: float = 0.9
    rate: float = 0.01
    motion_integration: bool = False
    fov_deg: float = 75.0
    epochs: int = 1
    seed: int = 0
    train_data: str = ""
    test_data: str = ""
    out_dir: str = "out"
    resume: str = ""                # checkpoint to continue from
    checkpoint_every: int = 0       # frames; 0 = end-of-epoch only
    # saccade controller
    window: str = "16x16"
    stiffness: float = 4.0
    damping: float = 4.5
    noise_sigma: float = 1.5
    threshold_decay: float = 0.99
    threshold_init: float = 0.0
    dt: float = 1.0 / 120.0
    pan_limit_deg: float = 90.0
    tilt_limit_deg: float = 45.0
    # demo
    demo_steps: int = 1000
    demo_learn: bool = False
    scene: str = "blobs"
    scene_seed: int = 0

    # ------------------------------------------------------------------
    # Parsing
    # ------------------------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def _coerce(cls, name: str, value):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in types:
            raise ConfigError(f"unknown config key {name!r}")
        if not isinstance(value, str):
            return value
        t = types[name]
        text = value.strip()
        if t == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        try:
            if t == "int":
                return int(text)
            if t == "float":
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        return text

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            setattr(cfg, key, cls._coerce(key, value))
        return cfg

    def with_overrides(self, **overrides) -> "RunConfig":
        cfg = replace(self)
        for key, value in overrides.items():
            if value is None:
                continue
            setattr(cfg, key, self._coerce(key, value))
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    # ------------------------------------------------------------------
    # Derived objects
    # ------------------------------------------------------------------

    @staticmethod
    def _parse_pair(text: str, what: str) -> tuple[int, int]:
        try:
            a, _, b = text.lower().partition("x")
            return int(a), int(b)
        except ValueError:
            raise ConfigError(f"{what}: expected WxH, got {text!r}") from None

    def hierarchy_spec(self) -> HierarchySpec:
        try:
            dims = tuple(self._parse_pair(part, "level_dims")
                         for part in self.level_dims.split(","))
        except ConfigError:
            raise
        fovea = None
        if self.fovea_region.strip():
            try:
                x, y, w, h = (int(p) for p in self.fovea_region.split(","))
            except ValueError:
                raise ConfigError(
                    f"fovea_region: expected x,y,w,h, got {self.fovea_region!r}"
                ) from None
            ftxt = self.fovea_factor.strip().lower()
            factor = (self._parse_pair(ftxt, "fovea_factor") if "x" in ftxt
                      else (int(ftxt), int(ftxt)))
            fovea = FoveaSpec(region=(x, y, w, h), factor=factor)
        spec = HierarchySpec(
            level_dims=dims,
            hidden_size=self.hidden_size,
            tile_size=self._parse_pair(self.tile, "tile"),
            fovea=fovea,
            topmost_broadcast=self.topmost_broadcast,
        )
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return spec

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.hierarchy_spec().frame_size
        return CameraIntrinsics.from_fov(w, h, self.fov_deg)

    def saccade_params(self) -> SaccadeParams:
        return SaccadeParams(
            intrinsics=self.intrinsics(),
            window=self._parse_pair(self.window, "window"),
            stiffness=self.stiffness,
            damping=self.damping,
            noise_sigma=self.noise_sigma,
            threshold_decay=self.threshold_decay,
            pan_limit=math.radians(self.pan_limit_deg),
            tilt_limit=math.radians(self.tilt_limit_deg),
        )

    def make_scene(self) -> PanoramaScene:
        if self.scene not in _SCENES:
            raise ConfigError(f"unknown scene {self.scene!r}; "
                              f"choose from {sorted(_SCENES)}")
        maker = _SCENES[self.scene]
        if self.scene in ("blobs", "two-object"):
            return maker(seed=self.scene_seed)
        return maker()

    def validate(self) -> None:
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must be in [0,1), got {self.tau}")
        if self.rate <= 0:
            raise ConfigError(f"rate must be positive, got {self.rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        spec = self.hierarchy_spec()
        w, h = spec.frame_size
        ww, wh = self._parse_pair(self.window, "window")
        if ww > w or wh > h:
            raise ConfigError(f"saccade window {self.window} larger than the "
                              f"{w}x{h} frame")
        if self.scene not in _SCENES:
            raise ConfigError(f"unknown scene {self.scene!r}")


# ---------------------------------------------------------------------------
# Curve smoothing
# ---------------------------------------------------------------------------

def smooth_curve(values, window: int) -> np.ndarray:
    """Centred moving average with zero padding of half a window per side.

    The padding deliberately drags both ends of the curve toward zero
    (the familiar start/end artifact of epoch-width smoothing); interior
    values of a constant series are untouched.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    full = np.convolve(values, np.ones(window)) / window
    start = window // 2
    return full[start:start + len(values)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PVMC"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def _spec_to_dict(spec: HierarchySpec) -> dict:
    return {
        "level_dims": [list(d) for d in spec.level_dims],
        "hidden_size": spec.hidden_size,
        "tile_size": list(spec.tile_size),
        "fovea": None if spec.fovea is None else {
            "region": list(spec.fovea.region),
            "factor": list(spec.fovea.factor),
        },
        "topmost_broadcast": spec.topmost_broadcast,
    }


def _spec_from_dict(d: dict) -> HierarchySpec:
    fovea = None
    if d.get("fovea"):
        fovea = FoveaSpec(region=tuple(d["fovea"]["region"]),
                          factor=tuple(d["fovea"]["factor"]))
    return HierarchySpec(
        level_dims=tuple(tuple(x) for x in d["level_dims"]),
        hidden_size=d["hidden_size"],
        tile_size=tuple(d["tile_size"]),
        fovea=fovea,
        topmost_broadcast=d["topmost_broadcast"],
    )


@dataclass
class Checkpoint:
    spec: HierarchySpec
    tau: float
    seed: int
    frames_seen: int
    rng_state: Optional[dict]
    config: Optional[dict]
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, h: Hierarchy, config: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> Path:
    """Write a versioned, CRC-protected snapshot (arrays stored as float32)."""
    arrays = h.state_arrays()
    header = {
        "spec": _spec_to_dict(h.spec),
        "tau": h.tau,
        "seed": h.seed,
        "frames_seen": h.frames_seen,
        "rng_state": rng_state,
        "config": config,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += _CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hjson))
    blob += hjson
    for a in arrays.values():
        blob += np.ascontiguousarray(a, dtype=np.float32).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size + 4:
        raise CheckpointFormatError(f"{path}: too short to be a checkpoint")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(data[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    arrays: dict[str, np.ndarray] = {}
    offset = _CKPT_HEAD.size + hlen
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        offset += 4 * n
    return Checkpoint(
        spec=_spec_from_dict(header["spec"]),
        tau=header["tau"],
        seed=header["seed"],
        frames_seen=header["frames_seen"],
        rng_state=header["rng_state"],
        config=header["config"],
        arrays=arrays,
    )


def restore_hierarchy(ckpt: Checkpoint, expected_spec: Optional[HierarchySpec] = None
                      ) -> Hierarchy:
    """Rebuild the hierarchy a checkpoint came from; reject a shape mismatch."""
    if expected_spec is not None and \
            _spec_to_dict(expected_spec) != _spec_to_dict(ckpt.spec):
        raise CheckpointSpecError(
            "checkpoint hierarchy spec does not match the configured one")
    h = Hierarchy(ckpt.spec, seed=ckpt.seed, tau=ckpt.tau)
    h.load_state_arrays(ckpt.arrays)
    h.frames_seen = ckpt.frames_seen
    return h


def _check_finite(h: Hierarchy) -> None:
    for name, a in h.state_arrays().items():
        if not np.isfinite(a).all():
            raise NumericError(f"non-finite values in {name}; aborting")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV, one row per frame, deterministic float text."""

    def __init__(self, path, columns: list[str], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append and self.path.exists() else "w"
        self._fh = open(self.path, mode)
        if mode == "w":
            self._fh.write(",".join(columns) + "\n")
        self.rows = 0

    def write(self, *values) -> None:
        self._fh.write(",".join(
            repr(v) if isinstance(v, float) else str(v) for v in values) + "\n")
        self.rows += 1

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> dict[str, np.ndarray]:
    """Load a metrics CSV into named float columns."""
    with open(path) as fh:
        names = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array(rows, dtype=np.float64) if rows else \
        np.empty((0, len(names)))
    return {name: data[:, i] for i, name in enumerate(names)}


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    train_metrics: Path
    test_metrics: Optional[Path]
    checkpoints: list[Path]
    frames: int


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: Optional[dict]) -> np.random.Generator:
    rng = np.random.default_rng()
    if state is not None:
        rng.bit_generator.state = state
    return rng


def _apply_motion(h: Hierarchy, pose_prev: PoseAngles, pose_now: PoseAngles,
                  k: CameraIntrinsics) -> None:
    h.set_pending_frame(
        compensate_prediction(h.pending_frame(), pose_prev, pose_now, k))
    h.set_signal_memory_frame(
        warp_frame(h.signal_memory_frame(), pose_prev, pose_now, k))


def _eval_pass(h: Hierarchy, files, cfg: RunConfig, k: CameraIntrinsics,
               writer: MetricsWriter, epoch: int) -> None:
    eh = h.clone()  # test streams must not disturb the training trajectory
    frame_idx = 0
    for path in files:
        prev_pose = None
        for rec in read_dataset(path):
            if cfg.motion_integration and prev_pose is not None:
                _apply_motion(eh, prev_pose, rec.pose, k)
            res = eh.step(rec.frame, train=False)
            writer.write(epoch, frame_idx, res.mse_image, res.mse_all)
            frame_idx += 1
            prev_pose = rec.pose


def train(cfg: RunConfig) -> TrainResult:
    """Stream the training sets for the configured epochs; evaluate after each.

    With `resume` set, the run fast-forwards the deterministic schedule to
    the checkpoint's frame counter and continues, appending to the metrics.
    """
    cfg.validate()
    spec = cfg.hierarchy_spec()
    k = cfg.intrinsics()
    train_files = dataset_files(cfg.train_data) if cfg.train_data else []
    if cfg.epochs > 0 and not train_files:
        raise DataError(f"no training sets found under {cfg.train_data!r}")
    test_files = dataset_files(cfg.test_data) if cfg.test_data else []

    rng = np.random.default_rng(cfg.seed)
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        h = restore_hierarchy(ckpt, spec)
        if ckpt.rng_state is not None:
            rng = _rng_from_state(ckpt.rng_state)
        skip = ckpt.frames_seen
    else:
        h = Hierarchy(spec, seed=cfg.seed, tau=cfg.tau)
        skip = 0
    _check_finite(h)

    fw, fh_ = spec.frame_size
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_writer = MetricsWriter(out / "train_metrics.csv",
                                 ["frame", "mse_image", "mse_all"],
                                 append=bool(cfg.resume))
    test_writer = MetricsWriter(out / "test_metrics.csv",
                                ["epoch", "frame", "mse_image", "mse_all"],
                                append=bool(cfg.resume)) if test_files else None

    checkpoints: list[Path] = []
    global_frame = 0
    try:
        for epoch in range(cfg.epochs):
            for set_path in train_files:
                prev_pose = None
                for rec in read_dataset(set_path):
                    if rec.frame.shape != (fh_, fw, 3):
                        raise DataError(
                            f"{set_path}: frame size {rec.frame.shape[:2]} does "
                            f"not match the configured {fh_}x{fw} input")
                    if global_frame < skip:
                        global_frame += 1
                        prev_pose = rec.pose
                        continue
                    train_frame = None
                    if cfg.motion_integration and prev_pose is not None:
                        _apply_motion(h, prev_pose, rec.pose, k)
                        train_frame = warp_frame(rec.frame, rec.pose, prev_pose, k)
                    res = h.step(rec.frame, train=True, rate=cfg.rate,
                                 train_frame=train_frame)
                    train_writer.write(global_frame, res.mse_image, res.mse_all)
                    global_frame += 1
                    prev_pose = rec.pose
                    if cfg.checkpoint_every and \
                            global_frame % cfg.checkpoint_every == 0:
                        p = save_checkpoint(
                            out / f"checkpoint_f{global_frame:08d}.pvmc", h,
                            config=cfg.to_dict(), rng_state=_rng_state(rng))
                        checkpoints.append(p)
                _check_finite(h)
            if global_frame > skip or cfg.epochs == 0:
                p = save_checkpoint(out / f"checkpoint_epoch_{epoch:03d}.pvmc",
                                    h, config=cfg.to_dict(),
                                    rng_state=_rng_state(rng))
                checkpoints.append(p)
            if test_writer is not None:
                _eval_pass(h, test_files, cfg, k, test_writer, epoch)
        if cfg.epochs == 0 and test_writer is not None:
            _eval_pass(h, test_files, cfg, k, test_writer, 0)
    finally:
        train_writer.close()
        if test_writer is not None:
            test_writer.close()
    return TrainResult(
        train_metrics=train_writer.path,
        test_metrics=test_writer.path if test_writer else None,
        checkpoints=checkpoints,
        frames=global_frame - skip,
    )


def evaluate(cfg: RunConfig, checkpoint: Optional[str] = None) -> Path:
    """Evaluation-only pass over the test sets; no parameter changes."""
    cfg.validate()
    spec = cfg.hierarchy_spec()
    k = cfg.intrinsics()
    test_files = dataset_files(cfg.test_data) if cfg.test_data else []
    if not test_files:
        raise DataError(f"no test sets found under {cfg.test_data!r}")
    if checkpoint:
        h = restore_hierarchy(load_checkpoint(checkpoint), spec)
    else:
        h = Hierarchy(spec, seed=cfg.seed, tau=cfg.tau)
    out = Path(cfg.out_dir)
    writer = MetricsWriter(out / "test_metrics.csv",
                           ["epoch", "frame", "mse_image", "mse_all"])
    try:
        _eval_pass(h, test_files, cfg, k, writer, 0)
    finally:
        writer.close()
    return writer.path


# ---------------------------------------------------------------------------
# Closed-loop demo
# ---------------------------------------------------------------------------

@dataclass
class DemoResult:
    metrics: Path
    steps: int
    fixation_switches: int
    triggers: int


def demo(cfg: RunConfig, checkpoint: Optional[str] = None) -> DemoResult:
    """Closed loop on a static scene.

    render at pose -> (optional) motion compensation -> network step ->
    error map -> controller step -> new pose from gaze.  A fixation switch
    is a triggered step whose equilibrium point actually moved.
    """
    cfg.validate()
    spec = cfg.hierarchy_spec()
    k = cfg.intrinsics()
    if checkpoint:
        ckpt = load_checkpoint(checkpoint)
        h = restore_hierarchy(ckpt, spec)
        rng = _rng_from_state(ckpt.rng_state) if ckpt.rng_state is not None \
            else np.random.default_rng(cfg.seed)
    else:
        h = Hierarchy(spec, seed=cfg.seed, tau=cfg.tau)
        rng = np.random.default_rng(cfg.seed)
    scene = cfg.make_scene()
    params = cfg.saccade_params()
    sacc = SaccadeState.at_home(k, rng, threshold_init=cfg.threshold_init)

    out = Path(cfg.out_dir)
    writer = MetricsWriter(out / "demo_metrics.csv",
                           ["frame", "mse_image", "mse_all", "gaze_x", "gaze_y",
                            "pan", "tilt", "triggered", "eq_x", "eq_y"])
    pose = gaze_to_pose(sacc.gaze, k, params.pan_limit, params.tilt_limit)
    prev_pose = None
    prev_eq = sacc.equilibrium
    switches = 0
    triggers = 0
    try:
        for t in range(cfg.demo_steps):
            frame = render(scene, pose, k)
            train_frame = None
            if cfg.motion_integration and prev_pose is not None:
                _apply_motion(h, prev_pose, pose, k)
                if cfg.demo_learn:
                    train_frame = warp_frame(frame, pose, prev_pose, k)
            res = h.step(frame, train=cfg.demo_learn, rate=cfg.rate,
                         train_frame=train_frame)
            sacc = saccade_step(sacc, res.errmap.pixels, params, cfg.dt)
            if sacc.triggered:
                triggers += 1
                if sacc.equilibrium != prev_eq:
                    switches += 1
            prev_eq = sacc.equilibrium
            writer.write(t, res.mse_image, res.mse_all,
                         sacc.gaze[0], sacc.gaze[1], pose.pan, pose.tilt,
                         int(sacc.triggered),
                         sacc.equilibrium[0], sacc.equilibrium[1])
            prev_pose = pose
            pose = gaze_to_pose(sacc.gaze, k, params.pan_limit, params.tilt_limit)
    finally:
        writer.close()
    return DemoResult(metrics=writer.path, steps=cfg.demo_steps,
                      fixation_switches=switches, triggers=triggers)
