"""EPnP: camera pose from n >= 4 2D-3D correspondences.

The 3D points are written as barycentric combinations of control points (the
centroid plus the principal directions).  The camera-frame control points lie
in the null space of the 2n x 3c projection system; the combination weights
(betas) are recovered from the preserved inter-control-point distances for
N = 1 to 4 null vectors, refined with Gauss-Newton, and the pose follows
from a closed-form absolute orientation.  The candidate with the lowest
reprojection error wins and, unless its error is already negligible, is
polished by Levenberg-Marquardt.  Four general points can still land on a
wrong local minimum; five or more are solved exactly.  Nearly planar point
sets use three control points and only the N = 1, 2 cases.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, InsufficientPoints
from .geometry import CameraIntrinsics, RigidTransform

PLANAR_RATIO = 1e-6
COLLINEAR_RATIO = 1e-6
GN_ITERATIONS = 10
# a winning candidate further off than this is polished on the reprojection error
POLISH_ABOVE_PX = 1e-9


def _control_points(pw: np.ndarray):
    centroid = pw.mean(axis=0)
    _, s, vt = np.linalg.svd(pw - centroid, full_matrices=False)
    if s[0] <= 0.0 or s[1] / s[0] < COLLINEAR_RATIO:
        raise DegenerateConfiguration("3D points are collinear")
    planar = s[2] / s[0] < PLANAR_RATIO
    n_dirs = 2 if planar else 3
    scale = s[:n_dirs] / np.sqrt(pw.shape[0])
    ctrl = np.vstack([centroid, centroid + scale[:, None] * vt[:n_dirs]])
    return ctrl, planar


def _barycentric(pw: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    d = ctrl[1:] - ctrl[0]
    rest = (pw - ctrl[0]) @ np.linalg.pinv(d)
    return np.column_stack([1.0 - rest.sum(axis=1), rest])


def _m_matrix(alphas: np.ndarray, uv: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    n, nc = alphas.shape
    m = np.zeros((2 * n, 3 * nc))
    m[0::2, 0::3] = alphas * k.fx
    m[0::2, 2::3] = alphas * (k.cx - uv[:, 0:1])
    m[1::2, 1::3] = alphas * k.fy
    m[1::2, 2::3] = alphas * (k.cy - uv[:, 1:2])
    return m


def _beta_system(null_vecs: list, pairs: list) -> np.ndarray:
    """Rows ``[<d_i, d_j> * (2 if i != j)]`` over the pair differences, for i <= j."""
    n = len(null_vecs)
    diffs = [np.array([v[a] - v[b] for a, b in pairs]) for v in null_vecs]
    cols = []
    for i in range(n):
        for j in range(i, n):
            f = 1.0 if i == j else 2.0
            cols.append(f * np.einsum("pk,pk->p", diffs[i], diffs[j]))
    return np.column_stack(cols)


def _initial_betas(null_vecs: list, pairs: list, dw: np.ndarray) -> np.ndarray:
    n = len(null_vecs)
    if n == 1:
        v = null_vecs[0]
        dv = np.array([np.linalg.norm(v[a] - v[b]) for a, b in pairs])
        return np.array([np.dot(dv, np.sqrt(dw)) / np.dot(dv, dv)])
    L = _beta_system(null_vecs, pairs)
    rho, *_ = np.linalg.lstsq(L, dw, rcond=None)
    if n == 2:
        b11, b12, b22 = rho
        b1 = np.sqrt(abs(b11))
        b2 = np.sqrt(abs(b22)) * (np.sign(b12) if b12 != 0 else 1.0)
        return np.array([b1, b2])
    b11, b12, b13, b22, b23, b33 = rho
    b1 = np.sqrt(abs(b11))
    b2 = np.sqrt(abs(b22)) * (np.sign(b12) if b12 != 0 else 1.0)
    b3 = np.sqrt(abs(b33)) * (np.sign(b13) if b13 != 0 else 1.0)
    return np.array([b1, b2, b3])


def _refine_betas(betas, null_vecs, pairs, dw) -> np.ndarray:
    diffs = np.stack([np.array([v[a] - v[b] for a, b in pairs]) for v in null_vecs])  # (N, P, 3)
    b = betas.astype(np.float64).copy()
    for _ in range(GN_ITERATIONS):
        d = np.einsum("n,npk->pk", b, diffs)
        r = np.einsum("pk,pk->p", d, d) - dw
        jac = 2.0 * np.einsum("pk,npk->pn", d, diffs)
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        b = b + step
        if np.linalg.norm(step) <= 1e-14 * max(1.0, np.linalg.norm(b)):
            break
    return b


def absolute_orientation(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` points onto ``dst``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ms).T @ (dst - md)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, md - r @ ms)


def reprojection_rms(t: RigidTransform, pw, uv, k: CameraIntrinsics) -> float:
    pc = t.apply(pw)
    z = pc[:, 2]
    if np.any(z <= 0):
        return float("inf")
    proj = np.column_stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy])
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


def epnp_solve(points_3d, points_2d, k: CameraIntrinsics) -> RigidTransform:
    """Pose ``T`` with ``K T X ~ x`` for the given correspondences."""
    pw = np.asarray(points_3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(points_2d, dtype=np.float64).reshape(-1, 2)
    if pw.shape[0] != uv.shape[0]:
        raise ValueError("3D and 2D point counts differ")
    if pw.shape[0] < 4:
        raise InsufficientPoints(f"EPnP needs at least 4 correspondences, got {pw.shape[0]}")

    ctrl, planar = _control_points(pw)
    nc = ctrl.shape[0]
    alphas = _barycentric(pw, ctrl)
    m = _m_matrix(alphas, uv, k)
    _, _, vt = np.linalg.svd(m, full_matrices=True)
    pairs = list(combinations(range(nc), 2))
    dw = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in pairs])

    best, best_err = None, np.inf
    # four general points leave a four-dimensional null space; that case starts
    # from the three-vector weights and lets Gauss-Newton find the fourth
    max_case = 2 if planar else 4
    betas = None
    for n_null in range(1, max_case + 1):
        null_vecs = [vt[-1 - i].reshape(nc, 3) for i in range(n_null)]
        betas = np.append(betas, 0.0) if n_null == 4 else _initial_betas(null_vecs, pairs, dw)
        betas = _refine_betas(betas, null_vecs, pairs, dw)
        cc = sum(b * v for b, v in zip(betas, null_vecs))
        pc = alphas @ cc
        if pc[:, 2].mean() < 0:
            cc, pc = -cc, -pc
        t = absolute_orientation(pw, pc)
        err = reprojection_rms(t, pw, uv, k)
        if err < best_err:
            best, best_err = t, err
    if best is None:
        raise DegenerateConfiguration("no EPnP case produced a pose in front of the camera")
    if best_err > POLISH_ABOVE_PX:
        polished = _polish(best, pw, uv, k)
        if reprojection_rms(polished, pw, uv, k) < best_err:
            best = polished
    return best


def _polish(t: RigidTransform, pw, uv, k: CameraIntrinsics) -> RigidTransform:
    """Levenberg-Marquardt on the reprojection error with a local rotation-vector update."""

    def pose(p):
        return RigidTransform(Rotation.from_rotvec(p[:3]).as_matrix() @ t.rotation, t.translation + p[3:])

    def residuals(p):
        pc = pose(p).apply(pw)
        z = np.maximum(pc[:, 2], 1e-9)
        proj = np.column_stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy])
        return (proj - uv).reshape(-1)

    sol = least_squares(residuals, np.zeros(6), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return pose(sol.x)

