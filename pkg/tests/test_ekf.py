import numpy as np
import pytest

from arttrack.ekf import CorrectionState, jacobian, measurement_fn, predict, update
from arttrack.errors import NonPositiveDepth, NoValidObservations
from arttrack.geometry import CameraIntrinsics, RigidTransform, pose_from_vector
from arttrack.renderer import pose_tool
from arttrack.scenario import DEFAULT_CALIBRATION, preset, simulate

from conftest import random_intrinsics, random_keypoints

K = CameraIntrinsics(800.0, 800.0, 360.0, 288.0, 720, 576)


def numeric_jacobian(x, p_b, t_cal, k, h=1e-5):
    cols = []
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        cols.append((measurement_fn(x + d, p_b, t_cal, k) - measurement_fn(x - d, p_b, t_cal, k)) / (2 * h))
    return np.column_stack(cols)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    k = random_intrinsics(rng)
    p_b = random_keypoints(rng)
    x = np.concatenate([rng.uniform(-0.1, 0.1, 3), rng.uniform(-5, 5, 3)])
    np.testing.assert_allclose(jacobian(x, p_b, DEFAULT_CALIBRATION, k), numeric_jacobian(x, p_b, DEFAULT_CALIBRATION, k),
                               rtol=1e-5, atol=1e-5)


def test_measurement_is_projection_of_corrected_points(rng):
    p_b = random_keypoints(rng)
    x = np.array([0.02, -0.01, 0.03, 1.0, -2.0, 0.5])
    pc = (pose_from_vector(x) @ DEFAULT_CALIBRATION).apply(p_b.points)
    expected = np.column_stack([K.fx * pc[:, 0] / pc[:, 2] + K.cx, K.fy * pc[:, 1] / pc[:, 2] + K.cy])
    np.testing.assert_allclose(measurement_fn(x, p_b, DEFAULT_CALIBRATION, K), expected.reshape(-1))


def test_jacobian_rejects_points_behind_camera(rng):
    p_b = random_keypoints(rng)
    with pytest.raises(NonPositiveDepth):
        jacobian(np.array([0, 0, 0, 0, 0, -500.0]), p_b, DEFAULT_CALIBRATION, K)


def test_predict_grows_covariance_only():
    s = CorrectionState.initial(x=np.arange(6) * 0.01)
    p = predict(s)
    np.testing.assert_array_equal(p.x, s.x)
    np.testing.assert_allclose(p.P, s.P + s.Q)


def test_update_moves_towards_true_correction(rng):
    p_b = random_keypoints(rng)
    truth = np.array([0.03, -0.02, 0.04, 4.0, -3.0, 2.0])
    z = measurement_fn(truth, p_b, DEFAULT_CALIBRATION, K).reshape(-1, 2)
    s = CorrectionState.initial()
    for _ in range(6):
        s, info = update(s, z, np.ones(14, bool), p_b, DEFAULT_CALIBRATION, K, gate_sigma=None)
    assert np.linalg.norm(s.x[3:] - truth[3:]) < 0.5
    assert np.all(np.diag(s.P) < np.diag(CorrectionState.initial().P))
    np.testing.assert_allclose(s.P, s.P.T)
    assert np.all(np.linalg.eigvalsh(s.P) >= 0)


def test_gate_drops_gross_outliers(rng):
    p_b = random_keypoints(rng)
    s = CorrectionState.initial()
    z = measurement_fn(s.x, p_b, DEFAULT_CALIBRATION, K).reshape(-1, 2)
    z[3] += 400.0
    _, info = update(s, z, np.ones(14, bool), p_b, DEFAULT_CALIBRATION, K, gate_sigma=3.0)
    assert info.rows_gated == 2
    assert info.rows_used == 26


def test_update_without_observations_raises(rng):
    p_b = random_keypoints(rng)
    s = CorrectionState.initial()
    with pytest.raises(NoValidObservations):
        update(s, np.zeros((14, 2)), np.zeros(14, bool), p_b, DEFAULT_CALIBRATION, K)


def test_invalid_rows_are_ignored(rng):
    p_b = random_keypoints(rng)
    s = CorrectionState.initial()
    z = measurement_fn(s.x, p_b, DEFAULT_CALIBRATION, K).reshape(-1, 2) + 1.0
    valid = np.zeros(14, bool)
    valid[:5] = True
    z2 = z.copy()
    z2[~valid] = np.nan
    a, _ = update(s, z, valid, p_b, DEFAULT_CALIBRATION, K, None)
    b, _ = update(s, z2, valid, p_b, DEFAULT_CALIBRATION, K, None)
    np.testing.assert_array_equal(a.x, b.x)


def test_state_transform_is_pose_from_vector():
    x = np.array([0.1, 0.0, -0.1, 1.0, 2.0, 3.0])
    assert CorrectionState.initial(x=x).transform == pose_from_vector(x)
    assert isinstance(CorrectionState.initial().transform, RigidTransform)


def _rig(points):
    """Keypoint set whose first rows are ``points``; the rest sit on the optical axis."""
    from arttrack.geometry import KeypointSet

    pts = np.tile([0.0, 0.0, 500.0], (14, 1))
    pts[: len(points)] = points
    return KeypointSet(pts)


IDENT = RigidTransform.identity()


def test_zero_process_noise_leaves_state_unchanged():
    s = CorrectionState.initial(x=np.ones(6) * 0.1, q=np.zeros((6, 6)))
    p = predict(s)
    np.testing.assert_array_equal(p.x, s.x)
    np.testing.assert_array_equal(p.P, s.P)


def test_zero_correction_is_plain_projection(rng):
    from arttrack.geometry import project_keypoints

    p_b = random_keypoints(rng)
    np.testing.assert_array_equal(
        measurement_fn(np.zeros(6), p_b, DEFAULT_CALIBRATION, K),
        project_keypoints(p_b, IDENT, DEFAULT_CALIBRATION, K).reshape(-1),
    )


def test_two_point_rig_by_hand():
    k = CameraIntrinsics(500.0, 400.0, 320.0, 240.0, 640, 480)
    p_b = _rig([(10.0, 0.0, 200.0), (0.0, -20.0, 400.0)])
    t_cal = RigidTransform.from_translation((0.0, 0.0, 100.0))
    # yaw of 90 degrees takes (x, y) to (-y, x); then 5 mm along +x
    x = np.array([0.0, 0.0, np.pi / 2, 5.0, 0.0, 0.0])
    h = measurement_fn(x, p_b, t_cal, k)
    # point 1: nominal (10, 0, 300) -> rotated (0, 10, 300) -> (5, 10, 300)
    # point 2: nominal (0, -20, 500) -> rotated (20, 0, 500) -> (25, 0, 500)
    np.testing.assert_allclose(h[:4], [320 + 500 * 5 / 300, 240 + 400 * 10 / 300, 320 + 500 * 25 / 500, 240.0],
                               atol=1e-9)


def test_translation_columns_on_optical_axis():
    k = CameraIntrinsics(500.0, 450.0, 320.0, 240.0, 640, 480)
    z = 250.0
    jac = jacobian(np.zeros(6), _rig([(0.0, 0.0, z)]), IDENT, k)
    du, dv = jac[0], jac[1]
    assert du[3] == pytest.approx(k.fx / z)
    assert du[4] == 0.0
    assert dv[4] == pytest.approx(k.fy / z)


def test_rotation_columns_match_interaction_matrix():
    k = CameraIntrinsics(600.0, 550.0, 320.0, 240.0, 640, 480)
    X, Y, Z = 30.0, -20.0, 300.0
    jac = jacobian(np.zeros(6), _rig([(X, Y, Z)]), IDENT, k)
    x, y = X / Z, Y / Z
    classic = np.array([
        [-k.fx * x * y, k.fx * (1 + x * x), -k.fx * y],
        [-k.fy * (1 + y * y), k.fy * x * y, k.fy * x],
    ])
    np.testing.assert_allclose(jac[:2, :3], classic, rtol=1e-12, atol=1e-12)


def test_zero_innovation_keeps_x_and_shrinks_p(rng):
    p_b = random_keypoints(rng)
    s = CorrectionState.initial(x=np.array([0.01, 0.0, -0.01, 1.0, 0.0, 2.0]))
    z = measurement_fn(s.x, p_b, DEFAULT_CALIBRATION, K)
    new, _ = update(s, z, np.ones(14, bool), p_b, DEFAULT_CALIBRATION, K, None)
    np.testing.assert_allclose(new.x, s.x, atol=1e-15)
    assert np.trace(new.P) < np.trace(s.P)


def test_huge_measurement_noise_barely_moves_state(rng):
    p_b = random_keypoints(rng)
    s = CorrectionState.initial(pixel_var=1e12)
    z = measurement_fn(np.array([0.05, 0, 0, 5, 5, 5]), p_b, DEFAULT_CALIBRATION, K)
    new, _ = update(s, z, np.ones(14, bool), p_b, DEFAULT_CALIBRATION, K, None)
    assert np.abs(new.x - s.x).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_iterated_updates_converge_to_truth(seed):
    # noiseless measurements, so the pixel variance is set near zero; each
    # iteration is one predict/update cycle as run by the tracker
    p_b = random_keypoints(np.random.default_rng(seed))
    truth = np.array([0.05, -0.03, 0.02, 4.0, -6.0, 10.0])
    z = measurement_fn(truth, p_b, DEFAULT_CALIBRATION, K)
    s = CorrectionState.initial(pixel_var=1e-4)
    for _ in range(30):
        s, _ = update(predict(s), z, np.ones(14, bool), p_b, DEFAULT_CALIBRATION, K, None)
    assert np.abs(s.x - truth).max() < 1e-3


def test_iterated_updates_converge_on_simulated_tool():
    manifest, _ = simulate(preset("default", n_frames=1))
    reading = manifest.frames[0].tools[0]
    p_b = pose_tool(manifest.tools[0], reading.joints, reading.t_e_b)
    truth = np.array([0.05, -0.03, 0.02, 4.0, -6.0, 10.0])
    k = manifest.intrinsics
    z = measurement_fn(truth, p_b, manifest.calibration, k)
    s = CorrectionState.initial(pixel_var=1e-4)
    for _ in range(30):
        s, _ = update(predict(s), z, np.ones(14, bool), p_b, manifest.calibration, k, None)
    assert np.abs(s.x - truth).max() < 1e-3
