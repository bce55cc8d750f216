"""Parametric articulated tool, forward kinematics and a flat-shaded rasterizer.

The tool is built from convex primitives: a prism-approximated cylindrical
shaft (with a distal band shaded differently), a box wrist and two tapered box
jaws.  Frames:

* ``E``: end-effector frame, origin at the distal end of the shaft, ``z``
  pointing along the shaft towards the jaws;
* wrist frame ``W = E * Rz(roll) * Rx(pitch)``;
* jaw frame ``J = W * Tz(wrist_length) * Ry(yaw)``, each jaw additionally
  rotated by ``Ry(+-opening / 2)``.

Fourteen keypoints sit on the skeleton, seven per side; label ``2k`` is on the
``+x`` side and ``2k + 1`` its mirror on the ``-x`` side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial import ConvexHull

from .errors import JointLimitViolation, ToolOutOfView
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    KeypointSet,
    RigidTransform,
    compose,
    rot_x,
    rot_y,
    rot_z,
)

KEYPOINT_NAMES = (
    "band_rear+", "band_rear-",
    "band_front+", "band_front-",
    "rear_pin+", "rear_pin-",
    "logo+", "logo-",
    "front_pin+", "front_pin-",
    "jaw_mid+", "jaw_mid-",
    "jaw_tip+", "jaw_tip-",
)
LOGO_IDS = (6, 7)

BACKGROUND_LEVEL = 110
# gray levels chosen so every part boundary (and part/background boundary)
# clears the default gradient threshold after smoothing
PART_SHADES = {"shaft": 30, "band": 200, "wrist": 40, "jaw+": 230, "jaw-": 230, "pin": 150, "logo": 95}

_FP_SHIFT = 4  # fixed-point bits for sub-pixel polygon filling


@dataclass(frozen=True)
class JointState:
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    opening: float = 0.0

    def as_dict(self) -> dict:
        return {"roll": self.roll, "pitch": self.pitch, "yaw": self.yaw, "opening": self.opening}


@dataclass(frozen=True)
class ToolModel:
    shaft_radius: float = 4.0
    shaft_length: float = 80.0
    band_length: float = 6.0
    shaft_sides: int = 16
    wrist_half_width: float = 3.0
    wrist_half_thickness: float = 2.6
    wrist_length: float = 9.0
    jaw_length: float = 11.0
    jaw_base_half_width: float = 2.0
    jaw_tip_half_width: float = 0.7
    jaw_half_thickness: float = 2.0
    # markings on both broad faces of the wrist: pin heads and a logo plate
    pin_radius: float = 0.9
    logo_half_width: float = 1.6
    logo_half_length: float = 1.0
    marking_thickness: float = 0.1
    # (low, high) in radians
    roll_limits: tuple = (-math.pi, math.pi)
    pitch_limits: tuple = (-math.radians(80.0), math.radians(80.0))
    yaw_limits: tuple = (-math.radians(80.0), math.radians(80.0))
    opening_limits: tuple = (0.0, math.radians(60.0))

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ToolModel":
        kwargs = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise KeyError(k)
            kwargs[k] = tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else v
        if "shaft_sides" in kwargs:
            kwargs["shaft_sides"] = int(kwargs["shaft_sides"])
        return cls(**kwargs)

    def check_joints(self, joints: JointState) -> None:
        for name in ("roll", "pitch", "yaw", "opening"):
            lo, hi = getattr(self, f"{name}_limits")
            v = getattr(joints, name)
            if not (lo - 1e-12 <= v <= hi + 1e-12) or not math.isfinite(v):
                raise JointLimitViolation(name, v)

    # -- local geometry ------------------------------------------------------

    def keypoint_offsets(self) -> list[tuple[str, np.ndarray]]:
        """(frame name, local point) for each of the 14 keypoints."""
        r, w, lw = self.shaft_radius, self.wrist_half_width, self.wrist_length
        lj = self.jaw_length
        mid_hw = 0.5 * (self.jaw_base_half_width + self.jaw_tip_half_width)
        out = []
        table = [
            ("E", lambda s: (s * r, 0.0, -self.band_length)),
            ("E", lambda s: (s * r, 0.0, 0.0)),
            ("W", lambda s: (s * w, 0.0, 0.2 * lw)),
            ("W", lambda s: (s * w, 0.0, 0.55 * lw)),
            ("W", lambda s: (s * w, 0.0, 0.9 * lw)),
            ("J", lambda s: (s * mid_hw, 0.0, 0.5 * lj)),
            ("J", lambda s: (s * self.jaw_tip_half_width, 0.0, lj)),
        ]
        for frame, fn in table:
            for sign in (1.0, -1.0):
                name = frame if frame != "J" else ("J+" if sign > 0 else "J-")
                out.append((name, np.array(fn(sign))))
        return out

    def part_vertices(self) -> list[tuple[str, str, np.ndarray]]:
        """(part name, frame name, local vertices) of each convex primitive."""
        n = self.shaft_sides
        ang = 2.0 * np.pi * np.arange(n) / n
        ring = np.stack([self.shaft_radius * np.cos(ang), self.shaft_radius * np.sin(ang)], axis=1)

        def prism(z0, z1):
            lo = np.column_stack([ring, np.full(n, z0)])
            hi = np.column_stack([ring, np.full(n, z1)])
            return np.vstack([lo, hi])

        w, t, lw = self.wrist_half_width, self.wrist_half_thickness, self.wrist_length
        wrist = np.array(
            [[x, y, z] for x in (-w, w) for y in (-t, t) for z in (0.0, lw)], dtype=np.float64
        )

        def jaw(sign):
            b, tip, jt, lj = (
                self.jaw_base_half_width,
                self.jaw_tip_half_width,
                self.jaw_half_thickness,
                self.jaw_length,
            )
            pts = []
            for y in (-jt, jt):
                pts += [[0.0, y, 0.0], [sign * b, y, 0.0], [0.0, y, lj], [sign * tip, y, lj]]
            return np.array(pts, dtype=np.float64)

        def plate(outline_xz, face_sign):
            y0 = face_sign * t
            y1 = face_sign * (t + self.marking_thickness)
            return np.array([[x, y, z] for y in (y0, y1) for x, z in outline_xz], dtype=np.float64)

        k = 12
        disc_ang = 2.0 * np.pi * np.arange(k) / k
        markings = []
        # pin heads sit near each side edge, so every side keypoint sees one
        pin_x = w - self.pin_radius - 0.3
        for face in (1.0, -1.0):
            for zc in (0.2 * lw, 0.9 * lw):
                for xc in (pin_x, -pin_x):
                    outline = [
                        (xc + self.pin_radius * math.cos(a), zc + self.pin_radius * math.sin(a))
                        for a in disc_ang
                    ]
                    markings.append(("pin", "W", plate(outline, face)))
            hw, hl, zc = self.logo_half_width, self.logo_half_length, 0.55 * lw
            outline = [(-hw, zc - hl), (hw, zc - hl), (hw, zc + hl), (-hw, zc + hl)]
            markings.append(("logo", "W", plate(outline, face)))

        return [
            ("shaft", "E", prism(-self.shaft_length, -self.band_length)),
            ("band", "E", prism(-self.band_length, 0.0)),
            ("wrist", "W", wrist),
            ("jaw+", "J+", jaw(1.0)),
            ("jaw-", "J-", jaw(-1.0)),
        ] + markings


def link_frames(model: ToolModel, joints: JointState) -> dict[str, RigidTransform]:
    """Transforms from each link frame to the end-effector frame E."""
    wrist = RigidTransform(rot_z(joints.roll) @ rot_x(joints.pitch), np.zeros(3))
    jaw = compose(wrist, RigidTransform(rot_y(joints.yaw), [0.0, 0.0, model.wrist_length]))
    half = 0.5 * joints.opening
    return {
        "E": RigidTransform.identity(),
        "W": wrist,
        "J": jaw,
        "J+": compose(jaw, RigidTransform(rot_y(half), np.zeros(3))),
        "J-": compose(jaw, RigidTransform(rot_y(-half), np.zeros(3))),
    }


def pose_tool(model: ToolModel, joints: JointState, t_e_b: RigidTransform) -> KeypointSet:
    """Forward kinematics: the 14 keypoints expressed in the base frame."""
    model.check_joints(joints)
    frames = link_frames(model, joints)
    pts = np.array(
        [compose(t_e_b, frames[f]).apply(p) for f, p in model.keypoint_offsets()]
    )
    return KeypointSet(pts)


_HULL_CACHE: dict = {}


def _local_halfspaces(verts: np.ndarray) -> np.ndarray:
    """Facet planes ``n . p <= d`` (rows ``[n, -d]``) of a convex vertex set."""
    key = verts.tobytes()
    eq = _HULL_CACHE.get(key)
    if eq is None:
        eq = ConvexHull(verts).equations  # n . p + off <= 0
        _HULL_CACHE[key] = eq
    return eq


@dataclass(frozen=True)
class ToolInstance:
    model: ToolModel
    joints: JointState
    t_e_b: RigidTransform


@dataclass(frozen=True, eq=False)
class RenderOutput:
    silhouette: np.ndarray       # bool (H, W)
    keypoints_2d: np.ndarray     # (14, 2), NaN where behind the camera
    depths: np.ndarray           # (14,) camera-frame z in mm
    visibility: np.ndarray       # (14,) bool
    image: np.ndarray | None = None   # uint8 flat-shaded view shared by all tools
    keypoints_cam: np.ndarray | None = None

    @property
    def visible_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.visibility)]


@dataclass(frozen=True, eq=False)
class SceneRender:
    image: np.ndarray
    silhouette: np.ndarray
    tools: list


def _part_solids(tool: ToolInstance, t_b_c: RigidTransform):
    frames = link_frames(tool.model, tool.joints)
    t_e_c = compose(t_b_c, tool.t_e_b)
    for name, frame, verts in tool.model.part_vertices():
        t = compose(t_e_c, frames[frame])
        eq = _local_halfspaces(verts)
        normals = eq[:, :3] @ t.rotation.T
        offsets = -eq[:, 3] + normals @ t.translation
        yield name, frame, t.apply(verts), normals, offsets


def ray_entry(points_cam: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Ray parameter where the camera ray towards each point enters a convex solid.

    Rays are ``s * p`` for ``s >= 0`` and the point itself sits at ``s = 1``.
    Returns ``inf`` for rays that miss the solid.
    """
    npd = points_cam @ normals.T  # (N, F)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = offsets[None, :] / npd
    lower = np.where(npd < 0, ratio, -np.inf).max(axis=1)
    upper = np.where(npd > 0, ratio, np.inf).min(axis=1)
    parallel_out = ((npd == 0) & (offsets[None, :] < 0)).any(axis=1)
    lower = np.maximum(lower, 0.0)
    hit = (lower <= upper) & ~parallel_out
    return np.where(hit, lower, np.inf)


def render_scene(
    tools: list[ToolInstance],
    t_b_c: RigidTransform,
    k: CameraIntrinsics,
    occlusion_tol: float = 0.05,
) -> SceneRender:
    """Rasterize every tool into one flat-shaded view with a shared depth order."""
    h, w = k.shape
    img = np.full((h, w), BACKGROUND_LEVEL, dtype=np.uint8)
    sil = np.zeros((h, w), dtype=np.uint8)

    solids = []
    for ti, tool in enumerate(tools):
        for name, frame, verts, normals, offsets in _part_solids(tool, t_b_c):
            solids.append((ti, name, frame, verts, normals, offsets))

    # painter's order: far parts first, ties by insertion order
    order = sorted(
        range(len(solids)), key=lambda i: (-float(solids[i][3][:, 2].mean()), i)
    )
    for i in order:
        _, name, _, verts, _, _ = solids[i]
        if np.any(verts[:, 2] <= MIN_DEPTH):
            continue
        uv = np.column_stack(
            [k.fx * verts[:, 0] / verts[:, 2] + k.cx, k.fy * verts[:, 1] / verts[:, 2] + k.cy]
        )
        fixed = np.round(uv * (1 << _FP_SHIFT)).astype(np.int64)
        if np.abs(fixed).max() > 2**30:
            continue
        hull = cv2.convexHull(fixed.astype(np.int32))
        cv2.fillConvexPoly(img, hull, int(PART_SHADES[name]), lineType=cv2.LINE_8, shift=_FP_SHIFT)
        cv2.fillConvexPoly(sil, hull, 1, lineType=cv2.LINE_8, shift=_FP_SHIFT)

    outputs = []
    for ti, tool in enumerate(tools):
        kp_frames = np.array([f for f, _ in tool.model.keypoint_offsets()])
        kp = pose_tool(tool.model, tool.joints, tool.t_e_b)
        pc = t_b_c.apply(kp.points)
        z = pc[:, 2]
        front = z > MIN_DEPTH
        uv = np.full((len(z), 2), np.nan)
        if front.any():
            uv[front, 0] = k.fx * pc[front, 0] / z[front] + k.cx
            uv[front, 1] = k.fy * pc[front, 1] / z[front] + k.cy
        visible = front.copy()
        visible[front] &= k.contains(uv[front])
        if visible.any():
            idx = np.flatnonzero(visible)
            for sti, _, frame, _, normals, offsets in solids:
                # a link never hides its own keypoints, only other links and tools do
                sel = idx if sti != ti else idx[kp_frames[idx] != frame]
                if sel.size == 0:
                    continue
                s_in = ray_entry(pc[sel], normals, offsets)
                # relative slack so points touching another link are not hidden by it
                sl = occlusion_tol / np.linalg.norm(pc[sel], axis=1)
                visible[sel] &= ~(s_in < 1.0 - sl)
        outputs.append(
            RenderOutput(
                silhouette=sil.astype(bool),
                keypoints_2d=uv,
                depths=z,
                visibility=visible,
                image=img,
                keypoints_cam=pc,
            )
        )
    return SceneRender(image=img, silhouette=sil.astype(bool), tools=outputs)


def render(
    model: ToolModel,
    joints: JointState,
    t_e_b: RigidTransform,
    t_b_c: RigidTransform,
    k: CameraIntrinsics,
) -> RenderOutput:
    """Render one tool; raises ``ToolOutOfView`` when no keypoint is visible."""
    out = render_scene([ToolInstance(model, joints, t_e_b)], t_b_c, k).tools[0]
    if not out.visibility.any():
        raise ToolOutOfView("no keypoint of the tool is visible")
    return out
