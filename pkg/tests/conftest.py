"""Shared fixtures: random cameras, posed keypoints and small simulated datasets."""

from __future__ import annotations

import numpy as np
import pytest

from arttrack.geometry import CameraIntrinsics, RigidTransform, euler_to_matrix
from arttrack.renderer import JointState, ToolModel, pose_tool
from arttrack.scenario import DEFAULT_CALIBRATION, preset, simulate, simulate_to


def random_intrinsics(rng: np.random.Generator) -> CameraIntrinsics:
    w, h = int(rng.integers(320, 1024)), int(rng.integers(240, 768))
    f = rng.uniform(300.0, 1200.0)
    return CameraIntrinsics(
        f, f * rng.uniform(0.95, 1.05), rng.uniform(0.4, 0.6) * w, rng.uniform(0.4, 0.6) * h, w, h
    )


def random_keypoints(rng: np.random.Generator):
    """Keypoints of a randomly posed tool roughly 100 mm in front of the nominal camera."""
    model = ToolModel()
    joints = JointState(
        rng.uniform(-1.0, 1.0), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(0.0, 0.8)
    )
    cam_pose = RigidTransform(
        euler_to_matrix(*rng.uniform(-0.4, 0.4, 3)), (rng.uniform(-15, 15), rng.uniform(-15, 15), 100.0)
    )
    t_e_b = DEFAULT_CALIBRATION.inverse() @ cam_pose
    return pose_tool(model, joints, t_e_b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_sim():
    """(manifest, images) of a short 64x64 sequence."""
    return simulate(preset("tiny", n_frames=12))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    manifest, path = simulate_to(preset("tiny", n_frames=12), out)
    return path.parent


@pytest.fixture(scope="session")
def short_dataset(tmp_path_factory):
    """A short full-size sequence written to disk."""
    out = tmp_path_factory.mktemp("short")
    manifest, path = simulate_to(preset("default", n_frames=20), out)
    return path.parent


def random_orientation_map(rng: np.random.Generator, shape=(64, 64), density=0.3, radius=2):
    """OrientationMap built from random one-hot masks, spread by ``radius``."""
    from arttrack.qgo import OrientationMap, spread

    h, w = shape
    on = rng.random(shape) < density
    quant = np.where(on, (1 << rng.integers(0, 8, shape)), 0).astype(np.uint8)
    mag = np.where(on, rng.uniform(30, 255, shape), 0).astype(np.float32)
    return OrientationMap(spread(quant, radius), on, quant, mag, (0, 0), (h, w))


def random_template(rng: np.random.Generator, part_id=0, n=None, half=8):
    from arttrack.qgo import PartTemplate

    n = int(rng.integers(8, 40)) if n is None else n
    feats = np.column_stack([rng.integers(-half, half + 1, n), rng.integers(-half, half + 1, n), rng.integers(0, 8, n)])
    return PartTemplate(part_id, (0, 0), (2 * half + 1, 2 * half + 1), feats, 100.0)


def zone_oracle(point, origin, axis_point, scale=1.0, angular_bin=30.0, radial_bin=10.0):
    """Scalar re-derivation of the polar zone: rotate into the grid frame, then bin."""
    import math

    ax, ay = axis_point[0] - origin[0], axis_point[1] - origin[1]
    n = math.hypot(ax, ay)
    ux, uy = ax / n, ay / n
    dx, dy = point[0] - origin[0], point[1] - origin[1]
    # coordinates in the frame whose x axis is the grid axis
    gx, gy = dx * ux + dy * uy, -dx * uy + dy * ux
    dist = math.hypot(gx, gy)
    if dist == 0.0:
        return 0, 0
    deg = math.degrees(math.atan2(gy, gx)) % 360.0
    return int(deg // angular_bin) % int(round(360.0 / angular_bin)), int(dist // (radial_bin * scale))


def random_context(rng: np.random.Generator, n_parts=10, n_cands=3, inlier_frac=0.7):
    """Virtual keypoints plus candidate pools where some parts have a candidate at the true spot."""
    from arttrack.qgo import MatchCandidate

    virtual = {p: tuple(rng.uniform(0, 300, 2)) for p in range(n_parts)}
    cands = {}
    for p, v in virtual.items():
        pool = []
        good = rng.random() < inlier_frac
        for r in range(n_cands):
            if good and r == int(rng.integers(0, n_cands)):
                loc = (v[0] + rng.normal(0, 0.5), v[1] + rng.normal(0, 0.5))
            else:
                loc = tuple(rng.uniform(0, 300, 2))
            pool.append(MatchCandidate(p, (float(loc[0]), float(loc[1])), 0.0, r + 1))
        scores = sorted(rng.uniform(0.5, 1.0, n_cands), reverse=True)
        cands[p] = [MatchCandidate(p, c.location, float(s), c.rank) for c, s in zip(pool, scores)]
    return virtual, cands


def similarity(cands: dict, angle: float, scale: float, shift) -> dict:
    """Apply one 2D similarity to every candidate location."""
    from dataclasses import replace
    import math

    c, s = math.cos(angle), math.sin(angle)
    out = {}
    for p, pool in cands.items():
        out[p] = [
            replace(m, location=(scale * (c * m.location[0] - s * m.location[1]) + shift[0],
                                 scale * (s * m.location[0] + c * m.location[1]) + shift[1]))
            for m in pool
        ]
    return out
