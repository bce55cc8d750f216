"""Rigid transforms, the pinhole camera and keypoint projection.

Conventions used everywhere in the package:

* translations in millimetres, angles in radians;
* a pose vector is ``[theta_x, theta_y, theta_z, r_x, r_y, r_z]`` and its
  rotation is ``Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x)`` (extrinsic X, then Y,
  then Z);
* ``compose(a, b)`` applies ``b`` first, then ``a`` (matrix product ``a @ b``);
* integer pixel coordinates address pixel centres, projections are sub-pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NonPositiveDepth, ValidationError

MIN_DEPTH = 1e-6


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, validate: bool = True, tol: float = 1e-6) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.size == 16:
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValidationError("transform", f"expected 16 numbers, got shape {m.shape}")
        if validate:
            check_rigid(m, tol=tol)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def check_rigid(m: np.ndarray, tol: float = 1e-6) -> None:
    """Raise ``ValidationError`` unless ``m`` is a finite proper rigid 4x4 matrix."""
    if not np.all(np.isfinite(m)):
        raise ValidationError("transform", "contains non-finite values")
    if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValidationError("transform", "bottom row must be [0, 0, 0, 1]")
    r = m[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ValidationError("transform", "rotation block is not orthonormal")
    det = float(np.linalg.det(r))
    if abs(det - 1.0) > tol:
        raise ValidationError("transform", f"rotation determinant is {det:.6g}, expected +1")


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def compose_chain(transforms: Iterable[RigidTransform]) -> RigidTransform:
    out = RigidTransform.identity()
    for t in transforms:
        out = compose(out, t)
    return out


# -- rotations ----------------------------------------------------------------


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    # angles already in range pass through untouched, free of round-off
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class PoseVector:
    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0
    r_x: float = 0.0
    r_y: float = 0.0
    r_z: float = 0.0

    def __post_init__(self):
        for name in ("theta_x", "theta_y", "theta_z"):
            object.__setattr__(self, name, wrap_angle(float(getattr(self, name))))

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "PoseVector":
        return cls(*[float(v) for v in x])

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.theta_x, self.theta_y, self.theta_z, self.r_x, self.r_y, self.r_z]
        )


def euler_to_matrix(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    return rot_z(theta_z) @ rot_y(theta_y) @ rot_x(theta_x)


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Inverse of ``euler_to_matrix``; unique for |theta_y| < pi/2."""
    sy = -float(r[2, 0])
    sy = min(1.0, max(-1.0, sy))
    theta_y = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        theta_x = math.atan2(r[2, 1], r[2, 2])
        theta_z = math.atan2(r[1, 0], r[0, 0])
    else:
        # gimbal lock: fold everything into theta_z
        theta_x = 0.0
        theta_z = math.atan2(-r[0, 1], r[1, 1])
    return wrap_angle(np.array([theta_x, theta_y, theta_z]))


def pose_from_vector(x) -> RigidTransform:
    if isinstance(x, PoseVector):
        x = x.as_array()
    x = np.asarray(x, dtype=np.float64)
    return RigidTransform(euler_to_matrix(x[0], x[1], x[2]), x[3:6])


def vector_from_pose(t: RigidTransform) -> np.ndarray:
    return np.concatenate([matrix_to_euler(t.rotation), t.translation])


# -- camera -------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"intrinsics.{name}", "must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("intrinsics", "focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValidationError("intrinsics", "image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("intrinsics", "principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.height), int(self.width)

    def contains(self, uv) -> np.ndarray:
        """Whether sub-pixel points fall on the image (pixel centres at integers)."""
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= -0.5)
            & (uv[:, 0] < self.width - 0.5)
            & (uv[:, 1] >= -0.5)
            & (uv[:, 1] < self.height - 0.5)
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def project_points(points_cam, k: CameraIntrinsics, part_ids=None) -> np.ndarray:
    """Pinhole projection of camera-frame points, dividing by depth."""
    p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
    z = p[:, 2]
    bad = np.flatnonzero(~(z > MIN_DEPTH))
    if bad.size:
        i = int(bad[0])
        pid = int(part_ids[i]) if part_ids is not None else i
        raise NonPositiveDepth(pid, float(z[i]))
    u = k.fx * p[:, 0] / z + k.cx
    v = k.fy * p[:, 1] / z + k.cy
    return np.stack([u, v], axis=1)


def project_homogeneous(points_h, k: CameraIntrinsics) -> np.ndarray:
    """Projection of homogeneous 4-vectors; invariant to the scale of each row."""
    p = np.atleast_2d(np.asarray(points_h, dtype=np.float64))
    return project_points(p[:, :3] / p[:, 3:4], k)


def unproject(uv, depth, k: CameraIntrinsics) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), (uv.shape[0],))
    x = (uv[:, 0] - k.cx) * z / k.fx
    y = (uv[:, 1] - k.cy) * z / k.fy
    return np.stack([x, y, z], axis=1)


# -- keypoints ----------------------------------------------------------------

N_KEYPOINTS = 14


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray
    part_ids: tuple = field(default_factory=lambda: tuple(range(N_KEYPOINTS)))

    def __post_init__(self):
        pts = _frozen(self.points, (-1, 3))
        ids = tuple(int(i) for i in self.part_ids)
        if pts.shape[0] != N_KEYPOINTS or len(ids) != N_KEYPOINTS:
            raise ValidationError("keypoints", f"expected {N_KEYPOINTS} keypoints, got {pts.shape[0]}")
        if len(set(ids)) != len(ids):
            raise ValidationError("keypoints", "part labels must be unique")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "part_ids", ids)

    def transformed(self, t: RigidTransform) -> "KeypointSet":
        return KeypointSet(t.apply(self.points), self.part_ids)

    def __len__(self):
        return N_KEYPOINTS


def project_keypoints(
    p_b: KeypointSet, t_corr: RigidTransform, t_cal: RigidTransform, k: CameraIntrinsics
) -> np.ndarray:
    """Pixels of ``K * T_corr * T_cal * p`` divided by depth, in input order."""
    pts = compose(t_corr, t_cal).apply(p_b.points)
    return project_points(pts, k, p_b.part_ids)
