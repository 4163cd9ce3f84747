import math

import numpy as np
import pytest

from pvm.motion import CameraIntrinsics, PoseAngles
from pvm.saccade import (SaccadeParams, SaccadeState, gaze_from_pose,
                         gaze_to_pose, max_error_window, saccade_step)

from _oracles import brute_force_max_window

K = CameraIntrinsics.from_fov(128, 96, 75.0)


def make_params(**kw):
    defaults = dict(intrinsics=K, window=(8, 8), stiffness=4.0, damping=4.5,
                    noise_sigma=0.0, threshold_decay=0.99)
    defaults.update(kw)
    return SaccadeParams(**defaults)


def make_state(rng=None, threshold=0.0, gaze=None):
    s = SaccadeState.at_home(K, rng or np.random.default_rng(0),
                             threshold_init=threshold)
    if gaze is not None:
        s.gaze = gaze
        s.equilibrium = gaze
    return s


class TestMaxErrorWindow:
    def test_uniform_map_breaks_ties_to_origin(self):
        errmap = np.full((48, 64), 0.25)
        pos, total = max_error_window(errmap, (8, 8))
        assert pos == (0, 0)
        assert total == float(errmap[0:8, 0:8].sum())

    def test_single_hot_pixel_tie_break(self):
        errmap = np.zeros((48, 64))
        errmap[20, 30] = 1.0  # (x=30, y=20)
        pos, total = max_error_window(errmap, (8, 8))
        assert pos == (23, 13)
        assert total == 1.0

    def test_hot_pixel_near_border_clamps(self):
        errmap = np.zeros((48, 64))
        errmap[2, 1] = 1.0
        pos, _ = max_error_window(errmap, (8, 8))
        assert pos == (0, 0)

    def test_matches_brute_force_exactly(self):
        """500 random maps: identical position AND bit-identical total."""
        rng = np.random.default_rng(99)
        for i in range(500):
            h = int(rng.integers(10, 40))
            w = int(rng.integers(10, 40))
            ww = int(rng.integers(2, min(9, w)))
            wh = int(rng.integers(2, min(9, h)))
            errmap = rng.uniform(0, 1, (h, w))
            if i % 7 == 0:
                errmap = np.round(errmap * 8) / 8  # many exact ties
            got = max_error_window(errmap, (ww, wh))
            ref = brute_force_max_window(errmap, (ww, wh))
            assert got[0] == ref[0]
            assert got[1] == ref[1]

    def test_window_larger_than_map_rejected(self):
        with pytest.raises(ValueError):
            max_error_window(np.zeros((4, 4)), (8, 8))


class TestThreshold:
    def test_rest_point_is_fixed(self):
        params = make_params()
        s = make_state()
        out = saccade_step(s, np.zeros((96, 128)), params, dt=0.01)
        assert out.gaze == s.gaze
        assert out.velocity == (0.0, 0.0)
        assert out.equilibrium == s.equilibrium
        assert out.threshold_avg == 0.0
        assert not out.triggered

    def test_geometric_convergence_to_constant_max(self):
        params = make_params(threshold_decay=0.9)
        s = make_state()
        errmap = np.zeros((96, 128))
        errmap[40, 60] = 2.0  # windowed max M = 2
        for n in range(1, 60):
            s = saccade_step(s, errmap, params, dt=0.01)
            expected = 2.0 * (1 - 0.9 ** n)
            assert abs(s.threshold_avg - expected) < 1e-12

    def test_sensitivity_around_converged_threshold(self):
        """At threshold M: a max of M+eps triggers, M-eps does not."""
        params = make_params()
        m, eps = 1.5, 1e-3
        base = make_state(threshold=m)
        hot = np.zeros((96, 128))
        hot[50, 70] = m + eps
        assert saccade_step(base, hot, params, dt=0.01).triggered
        base = make_state(threshold=m)
        hot[50, 70] = m - eps
        assert not saccade_step(base, hot, params, dt=0.01).triggered


class TestOscillator:
    def test_matches_discrete_closed_form(self):
        """sigma=0: iterates equal the eigendecomposition of the linear map."""
        k_s, c, dt = 4.0, 4.5, 0.05
        params = make_params(stiffness=k_s, damping=c)
        eq = (K.cx, K.cy)
        s = make_state(gaze=(K.cx + 30.0, K.cy - 12.0))
        s.equilibrium = eq
        a = np.array([[1 - dt * dt * k_s, dt * (1 - dt * c)],
                      [-dt * k_s, 1 - dt * c]])
        evals, evecs = np.linalg.eig(a)
        assert np.all(np.isreal(evals)) and np.all(np.abs(evals) < 1)
        state0 = np.array([[30.0, -12.0], [0.0, 0.0]])  # rows: (x - eq, v)
        coeff = np.linalg.solve(evecs, state0)
        errmap = np.zeros((96, 128))  # never triggers; equilibrium stays put
        xs_sim = []
        for n in range(1, 1001):
            s = saccade_step(s, errmap, params, dt=dt)
            xs_sim.append((s.gaze[0] - eq[0], s.gaze[1] - eq[1]))
        xs_sim = np.array(xs_sim)
        for n in (1, 10, 100, 500, 1000):
            closed = (evecs @ (coeff * (evals[:, None] ** n)))[0]
            np.testing.assert_allclose(xs_sim[n - 1], closed, atol=1e-6)

    def test_overdamped_convergence_is_monotone(self):
        params = make_params(stiffness=4.0, damping=4.5)
        s = make_state(gaze=(K.cx + 20.0, K.cy))
        s.equilibrium = (K.cx, K.cy)
        errmap = np.zeros((96, 128))
        prev = 20.0
        for _ in range(2000):
            s = saccade_step(s, errmap, params, dt=0.05)
            dist = s.gaze[0] - K.cx
            assert dist <= prev + 1e-12
            prev = dist
        assert abs(prev) < 1e-3

    def test_energy_nonincreasing(self):
        """E = v^2/2 + k (gaze-eq)^2 / 2 never grows when dt*c < 1, sigma=0."""
        k_s, c, dt = 4.0, 4.5, 0.1  # dt*c = 0.45 < 1
        params = make_params(stiffness=k_s, damping=c)
        rng = np.random.default_rng(5)
        for _ in range(5):
            s = make_state(gaze=(K.cx + rng.uniform(-40, 40),
                                 K.cy + rng.uniform(-30, 30)))
            s.velocity = tuple(rng.uniform(-5, 5, 2))
            s.equilibrium = (K.cx, K.cy)
            errmap = np.zeros((96, 128))
            e_prev = None
            for _ in range(500):
                s = saccade_step(s, errmap, params, dt=dt)
                dx = np.array(s.gaze) - np.array(s.equilibrium)
                e = 0.5 * np.dot(s.velocity, s.velocity) + \
                    0.5 * k_s * np.dot(dx, dx)
                if e_prev is not None:
                    assert e <= e_prev + 1e-12
                e_prev = e

    def test_noise_is_seeded_and_reproducible(self):
        params = make_params(noise_sigma=1.5)
        errmap = np.zeros((96, 128))
        traces = []
        for _ in range(2):
            s = make_state(rng=np.random.default_rng(31))
            trace = []
            for _ in range(50):
                s = saccade_step(s, errmap, params, dt=0.01)
                trace.append(s.gaze)
            traces.append(trace)
        assert traces[0] == traces[1]

    def test_trigger_retargets_toward_error(self):
        """A hot region right of centre pulls the gaze to the environment
        point whose pose centres that region (smaller pan here)."""
        params = make_params(window=(8, 8))
        s = make_state()
        errmap = np.zeros((96, 128))
        errmap[44:52, 100:108] = 1.0   # well right of the frame centre
        s = saccade_step(s, errmap, params, dt=0.01)
        assert s.triggered
        assert s.equilibrium[0] < K.cx  # mirrored into the environment plane
        for _ in range(3000):
            s = saccade_step(s, errmap, params, dt=0.05)
        np.testing.assert_allclose(s.gaze, s.equilibrium, atol=1e-3)


class TestGazePoseMapping:
    def test_principal_point_is_home(self):
        pose = gaze_to_pose((K.cx, K.cy), K)
        assert pose.pan == 0.0 and pose.tilt == 0.0

    def test_focal_offset_is_45_degrees(self):
        pose = gaze_to_pose((K.cx + K.focal_px, K.cy), K)
        assert abs(pose.pan - math.pi / 4) < 1e-12

    def test_clamped_to_rig_range(self):
        pose = gaze_to_pose((K.cx + 1e9, K.cy - 1e9), K,
                            pan_limit=math.pi / 3, tilt_limit=math.pi / 6)
        assert pose.pan == math.pi / 3
        assert pose.tilt == -math.pi / 6
        # default tilt range engages long before the pan asymptote
        pose = gaze_to_pose((K.cx, K.cy - 1e9), K)
        assert pose.tilt == -math.pi / 4

    def test_round_trip(self):
        for pan, tilt in ((0.3, 0.2), (-0.7, -0.1), (0.0, 0.4)):
            gaze = gaze_from_pose(PoseAngles(pan, tilt), K)
            pose = gaze_to_pose(gaze, K)
            assert abs(pose.pan - pan) < 1e-12
            assert abs(pose.tilt - tilt) < 1e-12

    def test_pose_delta_recovered_from_rendered_shift(self):
        """Pan the camera, track a centred marker's shift, recover the delta."""
        from pvm.simenv import PanoramaScene, render

        pano = np.zeros((512, 1024, 3))
        pano[253:259, 509:515, :] = 1.0  # dot at pan 0, tilt 0
        scene = PanoramaScene(pano)

        def centroid_x(frame):
            w = frame[:, :, 0]
            return float((w * np.arange(frame.shape[1])[None, :]).sum() / w.sum())

        x0 = centroid_x(render(scene, PoseAngles(0, 0), K))
        for deg in (2.0, 5.0, 10.0):
            delta = math.radians(deg)
            x1 = centroid_x(render(scene, PoseAngles(delta, 0), K))
            recovered = gaze_to_pose((K.cx + (x1 - x0), K.cy), K).pan
            assert abs(recovered - delta) < math.radians(0.5)
