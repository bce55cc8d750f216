"""Synthetic sequences with ground truth.

The camera frame ``C-`` is where the (erroneous) hand-eye calibration puts
the camera; the true camera is ``C = T_corr * C-``.  Arm trajectories are
described in ``C-`` and converted to base-frame kinematics, so the tool stays
in view whatever calibration is chosen.  The real image is rendered from the
true camera; the kinematic stream handed to the tracker carries jitter.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dataset import DatasetManifest, FrameRecord, ToolKinematics, ToolTruth, write_dataset
from .errors import ParseError, ValidationError
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    axis_angle,
    compose,
    euler_to_matrix,
    pose_from_vector,
)
from .renderer import BACKGROUND_LEVEL, JointState, ToolInstance, ToolModel, render_scene

OCCLUSION_LEVEL = 128


def _look_pose(position, shaft_dir, facing=(0.0, 0.0, -1.0)) -> RigidTransform:
    """Tool pose whose shaft axis ``z`` points along ``shaft_dir`` and ``y`` towards ``facing``."""
    z = np.asarray(shaft_dir, dtype=np.float64)
    z = z / np.linalg.norm(z)
    f = np.asarray(facing, dtype=np.float64)
    y = f - (f @ z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return RigidTransform(np.column_stack([x, y, z]), position)


@dataclass(frozen=True)
class ArmTrajectory:
    """Sinusoidal arm and joint motion around a nominal tool pose in ``C-``.

    ``tip`` is where the wrist base sits at rest (mm, nominal camera frame),
    ``shaft_dir`` the direction the shaft points towards the tip.
    """

    tip: tuple = (0.0, 0.0, 100.0)
    shaft_dir: tuple = (0.8, 0.5, 0.3)
    # amplitudes of the arm motion: rotation (rad) about the tip, translation (mm)
    rot_amp: tuple = (0.12, 0.12, 0.15)
    trans_amp: tuple = (8.0, 6.0, 8.0)
    periods: tuple = (173.0, 131.0, 157.0, 97.0, 113.0, 149.0)
    phase: float = 0.0
    # linear drift of the tip in mm per frame, used for crossing layouts
    drift: tuple = (0.0, 0.0, 0.0)
    joint_center: tuple = (0.0, 0.0, 0.0, 0.35)
    joint_amp: tuple = (0.4, 0.35, 0.35, 0.25)
    joint_periods: tuple = (89.0, 103.0, 79.0, 61.0)

    def pose(self, t: int) -> RigidTransform:
        ph = [2.0 * math.pi * t / p + self.phase + 0.7 * j for j, p in enumerate(self.periods)]
        rot = euler_to_matrix(*(a * math.sin(v) for a, v in zip(self.rot_amp, ph[:3])))
        shift = np.array([a * math.sin(v) for a, v in zip(self.trans_amp, ph[3:])])
        tip = np.asarray(self.tip, dtype=np.float64) + shift + t * np.asarray(self.drift)
        base = _look_pose(np.zeros(3), self.shaft_dir)
        r = rot @ base.rotation
        # E sits at the proximal end of the wrist: pull it back along the shaft
        return RigidTransform(r, tip - r[:, 2] * 4.0)

    def joints(self, t: int, model: ToolModel) -> JointState:
        vals = []
        for j, (c, a, p) in enumerate(zip(self.joint_center, self.joint_amp, self.joint_periods)):
            v = c + a * math.sin(2.0 * math.pi * t / p + self.phase + 1.3 * j)
            lo, hi = getattr(model, ("roll", "pitch", "yaw", "opening")[j] + "_limits")
            vals.append(min(hi, max(lo, v)))
        return JointState(*vals)


@dataclass(frozen=True)
class OcclusionEvent:
    start: int
    stop: int                       # exclusive
    rect: tuple = (0, 0, 10**6, 10**6)   # (x0, y0, x1, y1) pixels, clipped to the image


@dataclass(frozen=True)
class CameraStep:
    frame: int
    rotation_deg: float = 3.0
    translation_mm: float = 15.0
    axis: tuple = (0.3, -0.8, 0.5)
    direction: tuple = (0.6, 0.5, -0.62)

    def transform(self) -> RigidTransform:
        d = np.asarray(self.direction, dtype=np.float64)
        return RigidTransform(
            axis_angle(self.axis, math.radians(self.rotation_deg)), self.translation_mm * d / np.linalg.norm(d)
        )


@dataclass(frozen=True)
class ScenarioSpec:
    n_frames: int = 200
    seed: int = 0
    width: int = 720
    height: int = 576
    focal: float = 650.0
    # injected calibration error: the true correction T_C-^C as a pose vector
    calibration_error: tuple = (0.0504, -0.0504, 0.0504, 5.7735, -5.7735, 5.7735)
    jitter_mm: float = 0.5
    jitter_rad: float = 0.002
    image_noise: float = 5.0
    background_amp: float = 12.0
    arms: tuple = (ArmTrajectory(),)
    occlusions: tuple = ()
    camera_steps: tuple = ()

    def __post_init__(self):
        def need(cond, name, reason):
            if not cond:
                raise ValidationError(name, reason)

        need(self.n_frames >= 1, "n_frames", "must be >= 1")
        need(self.width > 0 and self.height > 0, "width", "image size must be positive")
        need(self.focal > 0, "focal", "must be positive")
        need(len(self.calibration_error) == 6, "calibration_error", "six numbers")
        for name in ("jitter_mm", "jitter_rad", "image_noise", "background_amp"):
            need(getattr(self, name) >= 0, name, "noise sigma must be >= 0")
        need(len(self.arms) >= 1, "arms", "at least one arm")
        for i, ev in enumerate(self.occlusions):
            need(0 <= ev.start < ev.stop <= self.n_frames, f"occlusions[{i}]", "range outside the sequence")
        for i, ev in enumerate(self.camera_steps):
            need(0 <= ev.frame < self.n_frames, f"camera_steps[{i}]", "frame outside the sequence")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        nested = {"arms": ArmTrajectory, "occlusions": OcclusionEvent, "camera_steps": CameraStep}
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValidationError(key, "unknown scenario key")
            if key in nested:
                sub = nested[key]
                if not isinstance(value, list):
                    raise ValidationError(key, "expected a list")
                try:
                    value = tuple(sub(**{k: tuple(v) if isinstance(v, list) else v for k, v in item.items()})
                                  for item in value)
                except TypeError as exc:
                    raise ValidationError(key, str(exc)) from None
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}", exc.msg) from None
    if not isinstance(data, dict):
        raise ParseError(str(path), "scenario must be a JSON object")
    return ScenarioSpec.from_dict(data)


# hand-eye result: the robot base sits behind and above the camera
DEFAULT_CALIBRATION = RigidTransform(euler_to_matrix(0.3, -0.2, 0.4), (-40.0, 25.0, 180.0))


def preset(name: str, **overrides) -> ScenarioSpec:
    """Named scenarios used by the tests and the CLI."""
    base = ScenarioSpec()
    if name == "default":
        spec = base
    elif name == "noiseless":
        spec = replace(base, jitter_mm=0.0, jitter_rad=0.0, image_noise=0.0)
    elif name == "zero_error":
        spec = replace(base, calibration_error=(0.0,) * 6, jitter_mm=0.0, jitter_rad=0.0, image_noise=0.0)
    elif name == "camera_step":
        spec = replace(base, n_frames=200, camera_steps=(CameraStep(100),))
    elif name == "occlusion":
        spec = replace(base, n_frames=160, occlusions=(OcclusionEvent(100, 120),))
    elif name == "two_tools_apart":
        spec = replace(
            base,
            arms=(
                ArmTrajectory(tip=(-38.0, 0.0, 105.0), shaft_dir=(0.8, 0.5, 0.3)),
                ArmTrajectory(tip=(40.0, 5.0, 105.0), shaft_dir=(-0.8, 0.5, 0.3), phase=1.7),
            ),
        )
    elif name == "two_tools_crossing":
        spec = replace(
            base,
            n_frames=200,
            arms=(
                ArmTrajectory(tip=(-5.0, 0.0, 100.0), shaft_dir=(0.8, 0.5, 0.3), trans_amp=(4.0, 4.0, 4.0)),
                ArmTrajectory(
                    tip=(45.0, 8.0, 90.0),
                    shaft_dir=(-0.8, -0.5, 0.3),
                    trans_amp=(3.0, 3.0, 3.0),
                    drift=(-0.45, 0.0, 0.0),
                    phase=0.9,
                ),
            ),
        )
    elif name == "tiny":
        spec = replace(base, width=64, height=64, focal=60.0, n_frames=100)
    else:
        raise ValidationError("preset", f"unknown scenario preset {name!r}")
    return replace(spec, **overrides) if overrides else spec


def _background(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth, low-contrast tissue-like texture around the background level."""
    import cv2

    h, w = spec.height, spec.width
    noise = rng.standard_normal((h // 8 + 2, w // 8 + 2))
    tex = cv2.resize(noise, (w, h), interpolation=cv2.INTER_CUBIC)
    tex = cv2.GaussianBlur(tex, (0, 0), 6.0)
    s = float(tex.std()) or 1.0
    return BACKGROUND_LEVEL + spec.background_amp * tex / s


def _jitter(t: RigidTransform, rng, sigma_mm: float, sigma_rad: float) -> RigidTransform:
    if sigma_mm == 0.0 and sigma_rad == 0.0:
        return t
    d = rng.standard_normal(6)
    delta = RigidTransform(euler_to_matrix(*(sigma_rad * d[:3])), sigma_mm * d[3:])
    return compose(t, delta)


def simulate(spec: ScenarioSpec, calibration: RigidTransform = DEFAULT_CALIBRATION):
    """Generate ``(manifest, images)`` for a scenario; deterministic given the seed."""
    rng = np.random.default_rng(spec.seed)
    k = spec.intrinsics
    models = tuple(ToolModel() for _ in spec.arms)
    background = _background(spec, rng)
    t_corr0 = pose_from_vector(spec.calibration_error)
    cal_inv = calibration.inverse()
    images, frames = [], []
    for t in range(spec.n_frames):
        t_corr = t_corr0
        for step in spec.camera_steps:
            if t >= step.frame:
                t_corr = compose(step.transform(), t_corr)
        true_cam = compose(t_corr, calibration)
        instances, readings = [], []
        for arm, model in zip(spec.arms, models):
            t_e_b = compose(cal_inv, arm.pose(t))
            joints = arm.joints(t, model)
            instances.append(ToolInstance(model, joints, t_e_b))
            readings.append(
                ToolKinematics(_jitter(t_e_b, rng, spec.jitter_mm, spec.jitter_rad), joints)
            )
        scene = render_scene(instances, true_cam, k)
        img = np.where(scene.silhouette, scene.image.astype(np.float64), background)
        if spec.image_noise > 0:
            img = img + spec.image_noise * rng.standard_normal(img.shape)
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        occluded = np.zeros(img.shape, dtype=bool)
        for ev in spec.occlusions:
            if ev.start <= t < ev.stop:
                x0, y0, x1, y1 = ev.rect
                occluded[max(0, y0) : max(0, y1), max(0, x0) : max(0, x1)] = True
        img[occluded] = OCCLUSION_LEVEL
        truth = []
        for inst, out in zip(instances, scene.tools):
            vis = out.visibility.copy()
            kp = out.keypoints_2d
            for j in np.flatnonzero(vis):
                c, r = int(math.floor(kp[j, 0] + 0.5)), int(math.floor(kp[j, 1] + 0.5))
                if occluded[r, c]:
                    vis[j] = False
            truth.append(ToolTruth(t_corr, compose(true_cam, inst.t_e_b), kp, vis))
        images.append(img)
        frames.append(FrameRecord(f"frames/{t:06d}.pgm", tuple(readings), tuple(truth)))
    manifest = DatasetManifest(
        intrinsics=k,
        calibration=calibration,
        tools=models,
        frames=tuple(frames),
        meta={"scenario": _jsonable(spec.to_dict())},
    )
    return manifest, images


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def simulate_to(spec: ScenarioSpec, out_dir, calibration: RigidTransform = DEFAULT_CALIBRATION):
    manifest, images = simulate(spec, calibration)
    path = write_dataset(manifest, images, out_dir)
    return manifest, path


def frames_from_simulation(manifest: DatasetManifest, images):
    """In-memory ``FrameBundle`` stream, equivalent to reading the written dataset."""
    from .dataset import FrameBundle

    for i, (rec, img) in enumerate(zip(manifest.frames, images)):
        yield FrameBundle(i, img, rec.tools, rec.ground_truth)
