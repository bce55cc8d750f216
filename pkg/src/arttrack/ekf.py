"""Extended Kalman filter over the six correction parameters.

State ``x = [theta_x, theta_y, theta_z, r_x, r_y, r_z]`` composes the
correction transform ``T_corr = pose_from_vector(x)`` that maps the nominal
(calibrated) camera frame onto the true camera frame.  The transition is the
identity; the measurement stacks the keypoint pixels ``K T_corr T_cal p / z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoValidObservations, NonPositiveDepth
from .geometry import (
    MIN_DEPTH,
    CameraIntrinsics,
    KeypointSet,
    RigidTransform,
    euler_to_matrix,
    pose_from_vector,
    project_keypoints,
    rot_x,
    rot_y,
    rot_z,
    wrap_angle,
)

DEFAULT_Q = np.diag([1e-6, 1e-6, 1e-6, 0.25, 0.25, 0.25])
DEFAULT_P0 = np.diag([0.01, 0.01, 0.01, 25.0, 25.0, 25.0])
DEFAULT_PIXEL_VAR = 4.0


def _symmetrize_psd(p: np.ndarray) -> np.ndarray:
    p = 0.5 * (p + p.T)
    w, v = np.linalg.eigh(p)
    if w.min() < 0.0:
        # round-off can leave tiny negative eigenvalues; clamp them
        p = (v * np.maximum(w, 0.0)) @ v.T
        p = 0.5 * (p + p.T)
    return p


@dataclass(frozen=True, eq=False)
class CorrectionState:
    x: np.ndarray
    P: np.ndarray = field(default_factory=lambda: DEFAULT_P0.copy())
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    R: np.ndarray = field(default_factory=lambda: DEFAULT_PIXEL_VAR * np.eye(28))

    def __post_init__(self):
        for name in ("x", "P", "Q", "R"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def initial(cls, x=None, p0=None, q=None, pixel_var: float = DEFAULT_PIXEL_VAR, n: int = 14):
        return cls(
            np.zeros(6) if x is None else np.asarray(x, dtype=np.float64),
            DEFAULT_P0 if p0 is None else p0,
            DEFAULT_Q if q is None else q,
            pixel_var * np.eye(2 * n),
        )

    @property
    def transform(self) -> RigidTransform:
        return pose_from_vector(self.x)


def predict(state: CorrectionState) -> CorrectionState:
    """Identity transition: the mean stays, the covariance grows by Q."""
    return replace(state, P=state.P + state.Q)


def _nominal_points(p_b: KeypointSet, t_cal: RigidTransform) -> np.ndarray:
    return t_cal.apply(p_b.points)


def measurement_fn(x, p_b: KeypointSet, t_cal: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """``[u1, v1, ..., un, vn]`` predicted by the correction ``x``."""
    return project_keypoints(p_b, pose_from_vector(x), t_cal, k).reshape(-1)


def _rotation_derivatives(x) -> tuple:
    tx, ty, tz = x[0], x[1], x[2]
    rx, ry, rz = rot_x(tx), rot_y(ty), rot_z(tz)
    cx, sx = np.cos(tx), np.sin(tx)
    cy, sy = np.cos(ty), np.sin(ty)
    cz, sz = np.cos(tz), np.sin(tz)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def jacobian(x, p_b: KeypointSet, t_cal: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Analytic ``d h / d x`` (2n x 6)."""
    x = np.asarray(x, dtype=np.float64)
    q = _nominal_points(p_b, t_cal)
    r = euler_to_matrix(x[0], x[1], x[2])
    pc = q @ r.T + x[3:6]
    z = pc[:, 2]
    bad = np.flatnonzero(~(z > MIN_DEPTH))
    if bad.size:
        i = int(bad[0])
        raise NonPositiveDepth(int(p_b.part_ids[i]), float(z[i]))
    n = pc.shape[0]
    # d(u, v) / d p_cam for each point
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * pc[:, 0] / z**2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * pc[:, 1] / z**2
    dpdx = np.zeros((n, 3, 6))
    for col, dr in enumerate(_rotation_derivatives(x)):
        dpdx[:, :, col] = q @ dr.T
    dpdx[:, :, 3:] = np.eye(3)
    return np.einsum("nij,njk->nik", dproj, dpdx).reshape(2 * n, 6)


@dataclass(frozen=True)
class UpdateInfo:
    rows_used: int
    rows_gated: int
    innovation_rms: float


def update(
    state: CorrectionState,
    z,
    valid,
    p_b: KeypointSet,
    t_cal: RigidTransform,
    k: CameraIntrinsics,
    gate_sigma: float | None = 3.0,
) -> tuple:
    """One EKF correction from the valid keypoint observations.

    ``z`` is ``(n, 2)`` pixels (or the stacked 2n vector) and ``valid`` a
    length-n mask.  Rows whose innovation exceeds ``gate_sigma`` standard
    deviations are dropped; ``gate_sigma=None`` disables gating.
    Returns ``(new_state, UpdateInfo)``.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    rows = np.flatnonzero(np.repeat(valid, 2) & np.isfinite(z))
    if rows.size == 0:
        raise NoValidObservations("no valid observation rows")
    x = state.x
    h = measurement_fn(x, p_b, t_cal, k)
    jac = jacobian(x, p_b, t_cal, k)
    innov = z[rows] - h[rows]
    H = jac[rows]
    Rm = state.R[np.ix_(rows, rows)]
    S = H @ state.P @ H.T + Rm
    gated = 0
    if gate_sigma is not None:
        keep = np.abs(innov) <= gate_sigma * np.sqrt(np.diag(S))
        gated = int((~keep).sum())
        if not keep.any():
            raise NoValidObservations("every observation row failed the innovation gate")
        if gated:
            rows, innov, H = rows[keep], innov[keep], H[keep]
            Rm = state.R[np.ix_(rows, rows)]
            S = H @ state.P @ H.T + Rm
    gain = np.linalg.solve(S, H @ state.P).T
    x_new = x + gain @ innov
    x_new[:3] = wrap_angle(x_new[:3])
    ikh = np.eye(6) - gain @ H
    p_new = ikh @ state.P @ ikh.T + gain @ Rm @ gain.T
    info = UpdateInfo(int(rows.size), gated, float(np.sqrt(np.mean(innov**2))))
    return replace(state, x=x_new, P=_symmetrize_psd(p_new)), info
