"""Outlier rejection of part matches by 2D geometrical context.

Two polar grids are anchored on a sampled pair of parts, one in the virtual
view and one in the camera image.  A part is an inlier when one of its
candidates falls in the same (angular, radial) zone of the camera grid as its
virtual keypoint does in the virtual grid.  Pairs are drawn in a progressive,
score-ordered sequence and the loop stops at the first pair that gathers
enough inliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateSample

MIN_PAIR_DISTANCE = 2.0
_EPS = 1e-9


@dataclass(frozen=True)
class PolarGridSpec:
    origin: tuple
    axis: tuple
    scale: float = 1.0
    angular_bin: float = 30.0
    radial_bin: float = 10.0

    def __post_init__(self):
        if self.radial_bin <= 0:
            raise ValueError("radial_bin must be positive")
        if self.angular_bin <= 0 or abs(360.0 / self.angular_bin - round(360.0 / self.angular_bin)) > 1e-9:
            raise ValueError("angular_bin must divide 360")
        n = math.hypot(*self.axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("axis must be a unit vector")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def through(cls, origin, toward, scale: float = 1.0, angular_bin: float = 30.0, radial_bin: float = 10.0):
        """Grid at ``origin`` whose major axis points at ``toward``."""
        d = np.asarray(toward, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
        n = float(np.hypot(d[0], d[1]))
        if n == 0.0:
            raise DegenerateSample("grid axis has zero length")
        return cls(
            (float(origin[0]), float(origin[1])),
            (float(d[0] / n), float(d[1] / n)),
            scale,
            angular_bin,
            radial_bin,
        )


def zones(points, grid: PolarGridSpec) -> np.ndarray:
    """Vectorized ``zone_of``: ``(N, 2)`` array of (angular, radial) indices."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dx = p[:, 0] - grid.origin[0]
    dy = p[:, 1] - grid.origin[1]
    ax, ay = grid.axis
    dist = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(ax * dy - ay * dx, ax * dx + ay * dy))
    ang = np.where(ang < 0.0, ang + 360.0, ang)
    # points on the axis must not flip to the last sector through round-off
    ang = np.where(ang >= 360.0 - _EPS, 0.0, ang)
    n_ang = int(round(360.0 / grid.angular_bin))
    a_idx = np.minimum(np.floor(ang / grid.angular_bin + _EPS).astype(np.int64), n_ang - 1)
    r_idx = np.floor(dist / (grid.radial_bin * grid.scale) + _EPS).astype(np.int64)
    at_origin = dist == 0.0
    a_idx[at_origin] = 0
    r_idx[at_origin] = 0
    return np.stack([a_idx, r_idx], axis=1)


def zone_of(point, grid: PolarGridSpec) -> tuple:
    """(angular index, radial index) of a point; the origin itself is zone (0, 0)."""
    a, r = zones([point], grid)[0]
    return int(a), int(r)


def scale_between(virtual_pair, real_pair) -> float:
    """Ratio of the real pair's length to the virtual pair's length."""
    (v1, v2), (r1, r2) = virtual_pair, real_pair
    dv = math.hypot(v2[0] - v1[0], v2[1] - v1[1])
    if dv < MIN_PAIR_DISTANCE:
        raise DegenerateSample(f"virtual pair only {dv:.3g} px apart")
    dr = math.hypot(r2[0] - r1[0], r2[1] - r1[1])
    if dr == 0.0:
        raise DegenerateSample("real pair points coincide")
    return dr / dv


@dataclass
class VerificationResult:
    inliers: list = field(default_factory=list)   # [(part_id, MatchCandidate)]
    iterations_used: int = 0
    success: bool = False
    sample: tuple | None = None   # ((part_a, rank_a), (part_b, rank_b)) of the reported grids

    @property
    def inlier_ids(self) -> list:
        return [pid for pid, _ in self.inliers]


def prosac_order(virtual_pts: dict, candidates: dict):
    """Sample sequence of ``((part_a, idx_a), (part_b, idx_b))``.

    Part pairs are ranked by the product of their best candidate scores
    (descending).  Hypotheses are released in growing rank-sum levels: level
    ``L`` offers every part pair's rank combinations with ``idx_a + idx_b ==
    L`` before any pair moves on to ``L + 1``.
    """
    parts = [p for p in sorted(virtual_pts) if candidates.get(p)]
    pairs = []
    for a, b in combinations(parts, 2):
        sa, sb = candidates[a][0].score, candidates[b][0].score
        # origin of the grid is the better-scoring part of the pair
        if sb > sa:
            a, b = b, a
        pairs.append((-(sa * sb), min(a, b), max(a, b), a, b))
    pairs.sort()
    max_level = max((len(candidates[p]) for p in parts), default=0) * 2 - 2
    for level in range(0, max_level + 1):
        for _, _, _, a, b in pairs:
            na, nb = len(candidates[a]), len(candidates[b])
            for ia in range(max(0, level - nb + 1), min(na, level + 1)):
                yield (a, ia), (b, level - ia)


class _Pools:
    """Candidate pools flattened once so each hypothesis costs two zone calls."""

    def __init__(self, virtual_pts: dict, candidates: dict):
        self.virtual_pts = virtual_pts
        self.candidates = candidates
        self.vids = sorted(virtual_pts)
        self.vxy = np.array([virtual_pts[p] for p in self.vids], dtype=np.float64).reshape(-1, 2)
        owners, locs, flat = [], [], []
        for pid in self.vids:
            for c in candidates.get(pid, ()):
                owners.append(pid)
                locs.append(c.location)
                flat.append(c)
        self.owner = np.array(owners, dtype=np.int64)
        self.cxy = np.array(locs, dtype=np.float64).reshape(-1, 2)
        self.flat = flat
        self.vzone_row = {p: i for i, p in enumerate(self.vids)}
        self.owner_row = np.array([self.vzone_row[p] for p in owners], dtype=np.int64)

    def evaluate(self, sample, angular_bin: float, radial_bin: float) -> list:
        (a, ia), (b, ib) = sample
        va, vb = self.virtual_pts[a], self.virtual_pts[b]
        ca, cb = self.candidates[a][ia], self.candidates[b][ib]
        scale = scale_between((va, vb), (ca.location, cb.location))
        vgrid = PolarGridSpec.through(va, vb, 1.0, angular_bin, radial_bin)
        rgrid = PolarGridSpec.through(ca.location, cb.location, scale, angular_bin, radial_bin)
        vz = zones(self.vxy, vgrid)
        cz = zones(self.cxy, rgrid)
        match = np.all(cz == vz[self.owner_row], axis=1)
        match &= (self.owner != a) & (self.owner != b)
        hits = np.flatnonzero(match)
        inliers = {a: ca, b: cb}
        if hits.size:
            # pools are sorted by score, so a part's first hit is its best one
            _, first = np.unique(self.owner[hits], return_index=True)
            for h in hits[first]:
                inliers[int(self.owner[h])] = self.flat[int(h)]
        return sorted(inliers.items())


def verify_context(
    virtual_pts: dict,
    candidates: dict,
    inlier_threshold: int = 4,
    max_iterations: int = 100,
    angular_bin: float = 30.0,
    radial_bin: float = 10.0,
) -> VerificationResult:
    """Progressive sample consensus over polar-grid zone agreement.

    ``virtual_pts`` maps part id to its virtual-view pixel, ``candidates``
    maps part id to its candidate list sorted by descending score.
    """
    pools = {p: c for p, c in candidates.items() if p in virtual_pts and c}
    flat = _Pools(virtual_pts, pools)
    best = VerificationResult()
    it = 0
    for sample in prosac_order(virtual_pts, pools):
        if it >= max_iterations:
            break
        it += 1
        try:
            inliers = flat.evaluate(sample, angular_bin, radial_bin)
        except DegenerateSample:
            continue
        if len(inliers) > len(best.inliers):
            best = VerificationResult(inliers, it, False, sample)
        if len(inliers) >= inlier_threshold:
            return VerificationResult(inliers, it, True, sample)
    best.iterations_used = it
    return best
