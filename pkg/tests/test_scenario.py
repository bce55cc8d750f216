import json

import numpy as np
import pytest

from arttrack.errors import ParseError, ValidationError
from arttrack.geometry import RigidTransform, pose_from_vector, project_keypoints
from arttrack.renderer import pose_tool
from arttrack.scenario import (
    OCCLUSION_LEVEL,
    CameraStep,
    OcclusionEvent,
    ScenarioSpec,
    load_scenario,
    preset,
    simulate,
)

PRESETS = ["default", "noiseless", "zero_error", "camera_step", "occlusion",
           "two_tools_apart", "two_tools_crossing", "tiny"]


@pytest.mark.parametrize("name", PRESETS)
def test_presets_build(name):
    spec = preset(name)
    assert spec.n_frames >= 1
    assert spec.intrinsics.width == spec.width


def test_unknown_preset_rejected():
    with pytest.raises(ValidationError):
        preset("does_not_exist")


def test_preset_overrides_apply():
    spec = preset("default", n_frames=7, seed=3)
    assert (spec.n_frames, spec.seed) == (7, 3)


@pytest.mark.parametrize("kwargs", [
    {"n_frames": 0},
    {"focal": -1.0},
    {"image_noise": -0.5},
    {"calibration_error": (0.0, 0.0)},
    {"arms": ()},
    {"n_frames": 10, "occlusions": (OcclusionEvent(5, 11),)},
])
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(ValidationError):
        ScenarioSpec(**kwargs)


def test_load_scenario_round_trip(tmp_path):
    spec = preset("occlusion", n_frames=30, occlusions=(OcclusionEvent(5, 9, (0, 0, 100, 80)),))
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert load_scenario(path) == spec


def test_load_scenario_rejects_unknown_key(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps({"n_frames": 5, "colour": "red"}))
    with pytest.raises(ValidationError):
        load_scenario(path)


@pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
def test_load_scenario_parse_errors(tmp_path, text):
    path = tmp_path / "scene.json"
    path.write_text(text)
    with pytest.raises(ParseError):
        load_scenario(path)


def test_same_seed_is_bit_identical():
    spec = preset("tiny", n_frames=5)
    m1, img1 = simulate(spec)
    m2, img2 = simulate(spec)
    assert m1 == m2
    for a, b in zip(img1, img2):
        assert a.dtype == np.uint8
        np.testing.assert_array_equal(a, b)


def test_different_seed_changes_images():
    _, a = simulate(preset("tiny", n_frames=2, seed=0))
    _, b = simulate(preset("tiny", n_frames=2, seed=1))
    assert not np.array_equal(a[0], b[0])


def test_occluded_rectangle_is_uniform_gray():
    rect = (10, 20, 60, 50)
    spec = preset("tiny", width=96, height=96, focal=90.0, n_frames=4,
                  occlusions=(OcclusionEvent(1, 3, rect),))
    manifest, images = simulate(spec)
    x0, y0, x1, y1 = rect
    for t in (1, 2):
        assert np.all(images[t][y0:y1, x0:x1] == OCCLUSION_LEVEL)
    assert not np.all(images[0][y0:y1, x0:x1] == OCCLUSION_LEVEL)
    # keypoints under the rectangle are reported hidden
    truth = manifest.frames[1].ground_truth[0]
    for (u, v), vis in zip(truth.keypoints, truth.visible):
        if vis:
            c, r = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
            assert not (x0 <= c < x1 and y0 <= r < y1)


def test_zero_error_truth_reprojects_exactly():
    manifest, _ = simulate(preset("zero_error", n_frames=3))
    k = manifest.intrinsics
    for rec in manifest.frames:
        for tool, reading, truth in zip(manifest.tools, rec.tools, rec.ground_truth):
            assert truth.t_corr == RigidTransform.identity()
            p_b = pose_tool(tool, reading.joints, reading.t_e_b)
            uv = project_keypoints(p_b, truth.t_corr, manifest.calibration, k)
            np.testing.assert_allclose(uv, truth.keypoints, atol=1e-9)


def test_injected_error_is_recorded_as_truth():
    spec = preset("default", n_frames=2)
    manifest, _ = simulate(spec)
    assert manifest.frames[0].ground_truth[0].t_corr == pose_from_vector(spec.calibration_error)


def test_camera_step_changes_truth_at_step_frame():
    spec = preset("camera_step", n_frames=6, camera_steps=(CameraStep(3),))
    manifest, _ = simulate(spec)
    t = [rec.ground_truth[0].t_corr for rec in manifest.frames]
    assert t[0] == t[2]
    assert t[3] == t[5]
    assert not t[2] == t[3]
