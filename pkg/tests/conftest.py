import numpy as np
import pytest

from pvm.harness import RunConfig
from pvm.motion import CameraIntrinsics
from pvm.simenv import blob_panorama, make_trajectories, record_dataset

DESK_LEVELS = "16x12,8x6,4x3,1x1"   # 32x24 input frames


@pytest.fixture(scope="session")
def desk_intrinsics():
    return CameraIntrinsics.from_fov(32, 24, 75.0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, desk_intrinsics):
    """Two small train sets and one test set of 32x24 rotating-camera video."""
    root = tmp_path_factory.mktemp("data")
    scene = blob_panorama(512, 256, seed=4)
    trajs = make_trajectories(4, 4, seed=2, period_range=(40.0, 160.0))
    record_dataset(scene, trajs, sets=2, frames_per_set=40, seed=1,
                   path=root / "train", k=desk_intrinsics)
    record_dataset(scene, trajs, sets=1, frames_per_set=40, seed=2,
                   path=root / "test", k=desk_intrinsics)
    return root


@pytest.fixture()
def desk_config(tiny_dataset, tmp_path):
    return RunConfig(
        level_dims=DESK_LEVELS,
        train_data=str(tiny_dataset / "train"),
        test_data=str(tiny_dataset / "test"),
        out_dir=str(tmp_path / "out"),
        epochs=1,
        seed=5,
        rate=0.05,
    )
