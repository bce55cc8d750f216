"""Correction-transform initialization from verified part matches.

Templates are matched at several scales and in-plane rotations over a wide
window; the verified inliers give 2D-3D correspondences (3D from kinematics
expressed in the nominal camera frame) that EPnP turns into a first estimate
of the correction, polished by Gauss-Newton on the reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .epnp import epnp_solve
from .errors import DegenerateConfiguration, InsufficientPoints, NonPositiveDepth
from .geometry import CameraIntrinsics, KeypointSet, RigidTransform, vector_from_pose, wrap_angle
from .ekf import jacobian, measurement_fn
from .qgo import resample_template


def template_variants(template, scales, rotations) -> list:
    """The template resampled at every (scale, rotation) pair."""
    return [resample_template(template, s, r) for s in scales for r in rotations]


def _residual(x, p_b, t_cal, k, uv, rows):
    return (uv.reshape(-1) - measurement_fn(x, p_b, t_cal, k))[rows]


def refine_correction(
    x0, p_b: KeypointSet, t_cal: RigidTransform, k: CameraIntrinsics, uv, valid, iterations: int = 10
) -> tuple:
    """Damped Gauss-Newton on the reprojection error of the valid keypoints.

    Returns ``(x, rms_px)``; ``rms_px`` is ``inf`` when the start point puts a
    keypoint behind the camera.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rows = np.flatnonzero(np.repeat(np.asarray(valid, dtype=bool), 2))
    x = np.asarray(x0, dtype=np.float64).copy()
    try:
        r = _residual(x, p_b, t_cal, k, uv, rows)
    except NonPositiveDepth:
        return x, float("inf")
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(iterations):
        J = jacobian(x, p_b, t_cal, k)[rows]
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(8):
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = x + step
            cand[:3] = wrap_angle(cand[:3])
            try:
                rc = _residual(cand, p_b, t_cal, k, uv, rows)
            except NonPositiveDepth:
                lam *= 10.0
                continue
            c = float(rc @ rc)
            if c < cost:
                x, r, cost = cand, rc, c
                lam = max(lam * 0.1, 1e-9)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
    return x, float(np.sqrt(cost / max(len(rows) // 2, 1)))


@dataclass(frozen=True, eq=False)
class InitResult:
    x: np.ndarray
    rms_px: float
    n_points: int
    source: str     # which start point won: "epnp" or "prior"


def solve_correction(
    p_b: KeypointSet,
    t_cal: RigidTransform,
    k: CameraIntrinsics,
    uv,
    valid,
    prior=None,
    iterations: int = 10,
) -> InitResult:
    """Correction estimate from 2D observations of some keypoints.

    EPnP on the correspondences (3D points in the nominal camera frame) and
    the ``prior`` correction both seed a Gauss-Newton polish; the lower
    reprojection error wins.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size < 4:
        raise InsufficientPoints(f"initialization needs at least 4 verified parts, got {idx.size}")
    starts = []
    pts_nominal = t_cal.apply(p_b.points)
    try:
        t = epnp_solve(pts_nominal[idx], uv[idx], k)
        starts.append(("epnp", vector_from_pose(t)))
    except DegenerateConfiguration:
        pass
    starts.append(("prior", np.zeros(6) if prior is None else np.asarray(prior, dtype=np.float64)))
    best = None
    for name, x0 in starts:
        x, rms = refine_correction(x0, p_b, t_cal, k, uv, valid, iterations)
        if best is None or rms < best.rms_px:
            best = InitResult(x, rms, int(idx.size), name)
    return best
