import hashlib
import math

import numpy as np
import pytest

from pvm.motion import CameraIntrinsics, PoseAngles, warp_frame
from pvm.simenv import (DatasetChecksumError, DatasetFormatError,
                        DatasetTruncatedError, DatasetVersionError,
                        PanoramaScene, blob_panorama, checkerboard_panorama,
                        dataset_files, gradient_panorama, make_trajectories,
                        read_dataset, read_ppm, record_dataset,
                        two_object_panorama, write_dataset, write_ppm)

K = CameraIntrinsics.from_fov(128, 96, 75.0)
K_SMALL = CameraIntrinsics.from_fov(32, 24, 75.0)


class TestRender:
    def test_deterministic(self):
        from pvm.simenv import render
        scene = blob_panorama(seed=1)
        pose = PoseAngles(0.3, -0.1)
        a = render(scene, pose, K)
        b = render(scene, pose, K)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (96, 128, 3)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_pan_by_one_panorama_column_shifts_sampling(self):
        """Panning by one panorama-pixel pitch advances every sampled column
        by exactly one; with a column-ramp panorama the output is the old
        output shifted one ramp step."""
        from pvm.simenv import render
        pw = 4096
        ramp = (np.arange(pw) % 256) / 255.0
        pano = np.repeat(np.repeat(ramp[None, :, None], 512, axis=0), 3, axis=2)
        scene = PanoramaScene(pano)
        pitch = 2 * math.pi / pw
        f0 = render(scene, PoseAngles(0.0, 0.0), K)
        f1 = render(scene, PoseAngles(pitch, 0.0), K)
        stepped = (np.round(f0 * 255) + 1) % 256 / 255.0
        np.testing.assert_allclose(f1, stepped, atol=1e-12)

    def test_render_warp_consistency(self):
        """The keystone: warp(render(p1), p1 -> p2) ~ render(p2) interior."""
        from pvm.simenv import render
        scene = blob_panorama(seed=3)
        rng = np.random.default_rng(17)
        lim = math.radians(3.0)
        for _ in range(20):
            base_pan = rng.uniform(-0.5, 0.5)
            base_tilt = rng.uniform(-0.3, 0.3)
            p1 = PoseAngles(base_pan, base_tilt)
            p2 = PoseAngles(base_pan + rng.uniform(-lim, lim),
                            base_tilt + rng.uniform(-lim, lim))
            warped = warp_frame(render(scene, p1, K), p1, p2, K)
            direct = render(scene, p2, K)
            interior = (slice(10, 86), slice(10, 118))
            mad = np.abs(warped[interior] - direct[interior]).mean()
            assert mad < 0.05

    def test_out_of_span_pose_clamped_and_logged(self, caplog):
        from pvm.simenv import render
        scene = PanoramaScene(np.full((64, 128, 3), 0.5),
                              tilt_half=math.radians(30))
        with caplog.at_level("WARNING", logger="pvm.simenv"):
            out = render(scene, PoseAngles(0.0, math.radians(45)), K_SMALL)
        assert np.isfinite(out).all()
        assert any("clamp" in rec.message for rec in caplog.records)


class TestTrajectories:
    def test_cross_product_counts(self):
        assert len(make_trajectories(20, 20, seed=0)) == 400
        assert len(make_trajectories(1, 1, seed=0)) == 1

    def test_all_three_families_present(self):
        trajs = make_trajectories(20, 20, seed=0)
        fams = {t.pan.family for t in trajs} | {t.tilt.family for t in trajs}
        assert fams == {"oscillation", "reflective", "resetting"}

    def test_poses_stay_inside_rig_limits(self):
        for traj in make_trajectories(6, 6, seed=3):
            for step in range(0, 1000, 7):
                pose = traj.pose_at(step)
                assert abs(pose.pan) <= math.pi / 2 + 1e-12
                assert abs(pose.tilt) <= math.pi / 4 + 1e-12

    def test_pure_in_seed(self):
        a = make_trajectories(5, 4, seed=11)
        b = make_trajectories(5, 4, seed=11)
        for ta, tb in zip(a, b):
            for step in (0, 13, 999):
                assert ta.pose_at(step) == tb.pose_at(step)

    def test_direction_reverses(self):
        trajs = make_trajectories(4, 1, seed=2)
        dirs = {t.pan.direction for t in trajs}
        assert dirs == {1, -1}

    def test_counts_validated(self):
        with pytest.raises(ValueError):
            make_trajectories(0, 5, seed=0)


class TestDatasetFormat:
    def make_records(self, n, w=16, h=12, seed=0):
        rng = np.random.default_rng(seed)
        recs = []
        for i in range(n):
            frame = rng.integers(0, 256, (h, w, 3)).astype(np.float64) / 255.0
            recs.append((i, PoseAngles(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)),
                         frame))
        return recs

    def test_round_trip_single_record(self, tmp_path):
        recs = self.make_records(1)
        path = tmp_path / "one.pvmd"
        write_dataset(path, recs, 16, 12)
        got = list(read_dataset(path))
        assert len(got) == 1
        assert got[0].index == 0
        assert got[0].pose == recs[0][1]
        np.testing.assert_array_equal(got[0].frame, recs[0][2])

    def test_round_trip_many_and_rewrite_identical(self, tmp_path):
        recs = self.make_records(5)
        p1, p2 = tmp_path / "a.pvmd", tmp_path / "b.pvmd"
        write_dataset(p1, recs, 16, 12)
        got = [(r.index, r.pose, r.frame) for r in read_dataset(p1)]
        write_dataset(p2, got, 16, 12)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_record_section(self, tmp_path):
        path = tmp_path / "empty.pvmd"
        write_dataset(path, [], 16, 12)
        assert list(read_dataset(path)) == []

    def test_corrupted_byte_names_record(self, tmp_path):
        path = tmp_path / "bad.pvmd"
        write_dataset(path, self.make_records(3), 16, 12)
        data = bytearray(path.read_bytes())
        rec_size = 8 + 16 + 16 * 12 * 3 + 4
        data[13 + rec_size + 40] ^= 0xFF  # inside record 1's pixels
        path.write_bytes(bytes(data))
        with pytest.raises(DatasetChecksumError, match="record 1"):
            list(read_dataset(path))

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "short.pvmd"
        write_dataset(path, self.make_records(2), 16, 12)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(DatasetTruncatedError):
            list(read_dataset(path))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pvmd"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DatasetFormatError):
            list(read_dataset(path))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "vers.pvmd"
        write_dataset(path, [], 16, 12)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(DatasetVersionError):
            list(read_dataset(path))


class TestRecordDataset:
    def test_counts_and_determinism(self, tmp_path):
        scene = checkerboard_panorama(256, 128, square=16)
        trajs = make_trajectories(3, 3, seed=5)
        files_a = record_dataset(scene, trajs, sets=2, frames_per_set=5,
                                 seed=9, path=tmp_path / "a", k=K_SMALL)
        files_b = record_dataset(scene, trajs, sets=2, frames_per_set=5,
                                 seed=9, path=tmp_path / "b", k=K_SMALL)
        assert len(files_a) == 2
        for fa, fb in zip(files_a, files_b):
            ha = hashlib.sha256(fa.read_bytes()).hexdigest()
            hb = hashlib.sha256(fb.read_bytes()).hexdigest()
            assert ha == hb
        records = list(read_dataset(files_a[0]))
        assert len(records) == 5
        assert records[0].frame.shape == (24, 32, 3)

    def test_dataset_files_sorted(self, tmp_path):
        scene = gradient_panorama(128, 64)
        trajs = make_trajectories(1, 1, seed=0)
        record_dataset(scene, trajs, sets=3, frames_per_set=1,
                       seed=0, path=tmp_path, k=K_SMALL)
        files = dataset_files(tmp_path)
        assert [f.name for f in files] == \
            ["set_0000.pvmd", "set_0001.pvmd", "set_0002.pvmd"]


class TestScenes:
    def test_values_in_range(self):
        for scene in (checkerboard_panorama(128, 64), gradient_panorama(128, 64),
                      blob_panorama(128, 64, seed=2),
                      two_object_panorama(256, 128, seed=1)):
            assert scene.image.min() >= 0.0
            assert scene.image.max() <= 1.0

    def test_two_object_scene_has_two_patches(self):
        scene = two_object_panorama(512, 256, separation_deg=60, seed=0)
        mid = scene.image[128]
        contrast = np.abs(mid - 0.45).sum(axis=1)
        cols = np.nonzero(contrast > 0.1)[0]
        gaps = np.diff(cols)
        assert (gaps > 1).sum() == 1  # exactly two separated column groups


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = rng.integers(0, 256, (12, 16, 3)).astype(np.float64) / 255.0
        path = tmp_path / "f.ppm"
        write_ppm(path, frame)
        got = read_ppm(path)
        np.testing.assert_array_equal(got, frame)

    def test_rejects_other_formats(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            read_ppm(path)
