"""Quantized gradient orientations, part templates and sliding-window matching.

Orientations are folded to [0, 180) degrees and quantized into 8 bins of 22.5
degrees, stored one bit per bin so a pixel (after spreading) is a byte mask.
The similarity of a template feature with orientation bin ``b`` against a map
mask is ``max |cos(angle(b) - angle(j))|`` over the bits ``j`` set in the mask
(0 for an empty mask); a template score is the mean over its features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from scipy import ndimage

from .errors import DegenerateTemplate

N_BINS = 8
BIN_DEG = 180.0 / N_BINS
BLUR_SIGMA = 1.0
BLUR_RADIUS = 4
# integer Gaussian weights (sigma 1, radius 4): on 8-bit input every partial
# sum is an exact integer in float64, so a pixel's value does not depend on
# the crop it was computed in
_GAUSS_INT = np.round(
    4096.0 * np.exp(-0.5 * (np.arange(-BLUR_RADIUS, BLUR_RADIUS + 1) / BLUR_SIGMA) ** 2)
)
_GAUSS_NORM = float(_GAUSS_INT.sum()) ** 2
# Sobel magnitude of an 8-bit image is at most 4 * 255 * sqrt(2)
MAG_SCALE = 1.0 / (4.0 * math.sqrt(2.0))
MAX_TEMPLATE_HALF = 64


# similarity of orientation bins b and j is round(SIM_LEVELS * |cos(angle between them)|);
# integer responses make every score an exact sum, independent of summation order
SIM_LEVELS = 127


def _similarity(b: int, j: int) -> int:
    return int(round(SIM_LEVELS * abs(math.cos((b - j) * math.pi / N_BINS))))


def _build_lut() -> np.ndarray:
    lut = np.zeros((N_BINS, 256), dtype=np.int16)
    for b in range(N_BINS):
        for mask in range(1, 256):
            lut[b, mask] = max(_similarity(b, j) for j in range(N_BINS) if mask >> j & 1)
    lut.setflags(write=False)
    return lut


SIM_LUT = _build_lut()
_BIN_OF_BIT = {1 << b: b for b in range(N_BINS)}


@dataclass(frozen=True, eq=False)
class OrientationMap:
    """Spread orientation masks over a window of the source image.

    ``origin`` is the (row, col) of element ``[0, 0]`` in image coordinates;
    pixels outside the window read as empty masks.
    """

    bins: np.ndarray              # uint8 spread masks
    magnitude_pass: np.ndarray    # bool
    quantized: np.ndarray         # uint8 one-hot masks before spreading
    magnitude: np.ndarray         # float32, scaled to [0, 255]
    origin: tuple = (0, 0)
    image_shape: tuple = (0, 0)
    _responses: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return self.bins.shape

    def window(self) -> tuple:
        """(row0, col0, row1, col1) covered, in image coordinates."""
        r0, c0 = self.origin
        return r0, c0, r0 + self.bins.shape[0], c0 + self.bins.shape[1]

    def responses(self) -> np.ndarray:
        """Per-bin integer similarity maps ``SIM_LUT[b][bins]`` padded by the template reach."""
        resp = self._responses.get("padded")
        if resp is None:
            p = MAX_TEMPLATE_HALF
            padded = np.pad(self.bins, p)
            resp = np.take(SIM_LUT, padded, axis=1)
            self._responses["padded"] = resp
        return resp

    def dump_layers(self, prefix) -> list:
        """Write one PGM per orientation bin (255 where the bit is set)."""
        from .pgm import write_pgm

        paths = []
        for b in range(N_BINS):
            path = f"{prefix}_bin{b}.pgm"
            write_pgm(path, ((self.bins >> b) & 1).astype(bool))
            paths.append(path)
        return paths


def spread(quantized: np.ndarray, radius: int) -> np.ndarray:
    """OR every mask into its (2r+1)^2 neighbourhood (separable)."""
    rows = quantized.copy()
    for d in range(1, radius + 1):
        rows[:, d:] |= quantized[:, :-d]
        rows[:, :-d] |= quantized[:, d:]
    out = rows.copy()
    for d in range(1, radius + 1):
        out[d:, :] |= rows[:-d, :]
        out[:-d, :] |= rows[d:, :]
    return out


def quantize_orientation(gx, gy) -> np.ndarray:
    """Bin index in 0..7 of gradient direction folded to [0, 180) degrees."""
    ang = np.degrees(np.arctan2(gy, gx))
    ang = np.where(ang < 0.0, ang + 180.0, ang)
    ang = np.where(ang >= 180.0, ang - 180.0, ang)
    return np.minimum((ang // BIN_DEG).astype(np.int64), N_BINS - 1)


def compute_orientation_map(
    image: np.ndarray,
    magnitude_threshold: float = 30.0,
    spread_radius: int = 3,
    roi: tuple | None = None,
) -> OrientationMap:
    """Quantized, spread gradient orientations of a grayscale image.

    ``roi = (row0, col0, row1, col1)`` restricts the output window; values in
    the window equal those of the full-image map.
    """
    img = np.asarray(image)
    h, w = img.shape
    if roi is None:
        r0, c0, r1, c1 = 0, 0, h, w
    else:
        r0, c0, r1, c1 = (int(v) for v in roi)
        r0, c0, r1, c1 = max(0, r0), max(0, c0), min(h, r1), min(w, c1)
        if r1 <= r0 or c1 <= c0:
            r0, c0, r1, c1 = 0, 0, 0, 0
    if r1 <= r0 or c1 <= c0:
        e8 = np.zeros((0, 0), np.uint8)
        return OrientationMap(e8, e8.astype(bool), e8, e8.astype(np.float32), (r0, c0), (h, w))

    pad = BLUR_RADIUS + 1 + spread_radius
    pr0, pc0 = max(0, r0 - pad), max(0, c0 - pad)
    pr1, pc1 = min(h, r1 + pad), min(w, c1 + pad)
    crop = np.ascontiguousarray(np.rint(img[pr0:pr1, pc0:pc1]), dtype=np.float64)
    border = cv2.BORDER_REFLECT_101
    blurred = cv2.sepFilter2D(crop, cv2.CV_64F, _GAUSS_INT, _GAUSS_INT, borderType=border)
    gx = cv2.Sobel(blurred, cv2.CV_64F, 1, 0, ksize=3, borderType=border)
    gy = cv2.Sobel(blurred, cv2.CV_64F, 0, 1, ksize=3, borderType=border)
    mag = (np.hypot(gx, gy) * (MAG_SCALE / _GAUSS_NORM)).astype(np.float32)

    passing = mag >= magnitude_threshold
    quant = np.zeros(crop.shape, dtype=np.uint8)
    if passing.any():
        b = quantize_orientation(gx[passing], gy[passing])
        quant[passing] = (1 << b).astype(np.uint8)
    spread_q = spread(quant, spread_radius) if spread_radius > 0 else quant

    sl = (slice(r0 - pr0, r1 - pr0), slice(c0 - pc0, c1 - pc0))
    return OrientationMap(
        bins=np.ascontiguousarray(spread_q[sl]),
        magnitude_pass=np.ascontiguousarray(passing[sl]),
        quantized=np.ascontiguousarray(quant[sl]),
        magnitude=np.ascontiguousarray(mag[sl]),
        origin=(r0, c0),
        image_shape=(h, w),
    )


# -- templates ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PartTemplate:
    part_id: int
    anchor: tuple                 # (x, y) integer pixel of the keypoint
    box: tuple                    # (width, height) in pixels
    features: np.ndarray          # (n, 3) int: dx, dy, orientation bin
    depth_at_extract: float
    scale: float = 1.0
    rotation_deg: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.int64).reshape(-1, 3)
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @property
    def n_features(self) -> int:
        return int(self.features.shape[0])


def box_side(depth: float, base_box: float = 40.0, reference_depth: float = 100.0) -> int:
    """Template box side: inverse-depth scaling clamped to [16, 128] px."""
    side = int(round(base_box * reference_depth / depth))
    return min(128, max(16, side))


_SPACING_CACHE: dict = {}


def _spacing_offsets(min_spacing: float) -> list:
    offs = _SPACING_CACHE.get(min_spacing)
    if offs is None:
        r = int(math.floor(min_spacing))
        offs = [
            (dy, dx)
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)
            if dx * dx + dy * dy <= min_spacing * min_spacing
        ]
        _SPACING_CACHE[min_spacing] = offs
    return offs


def extract_part_template(
    part_id: int,
    keypoint_xy,
    depth: float,
    omap: OrientationMap,
    base_box: float = 40.0,
    reference_depth: float = 100.0,
    max_features: int = 64,
    min_features: int = 8,
    min_spacing: float = 2.0,
) -> PartTemplate:
    """Sample the strongest contour pixels in the depth-scaled box around a keypoint."""
    side = box_side(depth, base_box, reference_depth)
    ax, ay = int(round(float(keypoint_xy[0]))), int(round(float(keypoint_xy[1])))
    half = side // 2
    bx0, by0 = ax - half, ay - half
    mr0, mc0, mr1, mc1 = omap.window()
    # box clipped to the map window
    r0, r1 = max(by0, mr0), min(by0 + side, mr1)
    c0, c1 = max(bx0, mc0), min(bx0 + side, mc1)
    feats: list = []
    if r1 > r0 and c1 > c0:
        sub_pass = omap.magnitude_pass[r0 - mr0 : r1 - mr0, c0 - mc0 : c1 - mc0]
        rows, cols = np.nonzero(sub_pass)
        if rows.size:
            mags = omap.magnitude[r0 - mr0 : r1 - mr0, c0 - mc0 : c1 - mc0][rows, cols]
            order = np.lexsort((cols, rows, -mags.astype(np.float64)))
            quant = omap.quantized[r0 - mr0 : r1 - mr0, c0 - mc0 : c1 - mc0]
            hh, ww = r1 - r0, c1 - c0
            taken = bytearray(hh * ww)
            offs = _spacing_offsets(min_spacing)
            rows_l, cols_l = rows[order].tolist(), cols[order].tolist()
            for r, c in zip(rows_l, cols_l):
                if taken[r * ww + c]:
                    continue
                feats.append((c + c0 - ax, r + r0 - ay, _BIN_OF_BIT[int(quant[r, c])]))
                if len(feats) >= max_features:
                    break
                for dy, dx in offs:
                    rr, cc = r + dy, c + dx
                    if 0 <= rr < hh and 0 <= cc < ww:
                        taken[rr * ww + cc] = 1
    if len(feats) < min_features:
        raise DegenerateTemplate(part_id, len(feats))
    return PartTemplate(
        part_id=int(part_id),
        anchor=(ax, ay),
        box=(side, side),
        features=np.array(feats, dtype=np.int64),
        depth_at_extract=float(depth),
    )


def extract_part_templates(
    render,
    omap: OrientationMap,
    base_box: float = 40.0,
    reference_depth: float = 100.0,
    max_features: int = 64,
    min_features: int = 8,
) -> list:
    """One template per visible keypoint of a ``RenderOutput``; contour-poor parts are skipped."""
    out = []
    for pid in np.flatnonzero(render.visibility):
        try:
            out.append(
                extract_part_template(
                    int(pid),
                    render.keypoints_2d[pid],
                    float(render.depths[pid]),
                    omap,
                    base_box,
                    reference_depth,
                    max_features,
                    min_features,
                )
            )
        except DegenerateTemplate:
            continue
    return out


def template_roi(keypoints_xy, depths, base_box: float, reference_depth: float) -> tuple:
    """Smallest (row0, col0, row1, col1) window holding every template box."""
    r0 = c0 = 10**9
    r1 = c1 = -(10**9)
    for (x, y), d in zip(keypoints_xy, depths):
        half = box_side(d, base_box, reference_depth) // 2 + 1
        ax, ay = int(round(x)), int(round(y))
        r0, r1 = min(r0, ay - half), max(r1, ay + half + 1)
        c0, c1 = min(c0, ax - half), max(c1, ax + half + 1)
    return r0, c0, r1, c1


def resample_template(t: PartTemplate, scale: float, rotation_deg: float) -> PartTemplate:
    """Template features scaled and rotated about the anchor (image y points down)."""
    if scale == 1.0 and rotation_deg == 0.0:
        return t
    phi = math.radians(rotation_deg)
    c, s = math.cos(phi), math.sin(phi)
    seen = set()
    feats = []
    for dx, dy, b in t.features.tolist():
        nx = int(round(scale * (c * dx - s * dy)))
        ny = int(round(scale * (s * dx + c * dy)))
        nx = max(-MAX_TEMPLATE_HALF, min(MAX_TEMPLATE_HALF, nx))
        ny = max(-MAX_TEMPLATE_HALF, min(MAX_TEMPLATE_HALF, ny))
        if (nx, ny) in seen:
            continue
        seen.add((nx, ny))
        ang = ((b + 0.5) * BIN_DEG + rotation_deg) % 180.0
        feats.append((nx, ny, min(N_BINS - 1, int(ang // BIN_DEG))))
    side = int(round(t.box[0] * scale))
    return PartTemplate(
        part_id=t.part_id,
        anchor=t.anchor,
        box=(side, side),
        features=np.array(feats, dtype=np.int64),
        depth_at_extract=t.depth_at_extract,
        scale=t.scale * scale,
        rotation_deg=t.rotation_deg + rotation_deg,
    )


# -- matching -----------------------------------------------------------------


@dataclass(frozen=True)
class MatchCandidate:
    part_id: int
    location: tuple   # (x, y) sub-pixel: centre of the score plateau at the peak
    score: float
    rank: int
    peak: tuple = (0, 0)   # (x, y) integer location of the peak


def _clip_region(region, omap: OrientationMap) -> tuple:
    x0, y0, x1, y1 = (int(v) for v in region)
    h, w = omap.image_shape
    return max(0, x0), max(0, y0), min(w, x1), min(h, y1)


def _mask_lookup(omap: OrientationMap, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    r0, c0 = omap.origin
    hh, ww = omap.bins.shape
    rr, cc = ys - r0, xs - c0
    inside = (rr >= 0) & (rr < hh) & (cc >= 0) & (cc < ww)
    out = np.zeros(rr.shape, dtype=np.uint8)
    out[inside] = omap.bins[rr[inside], cc[inside]]
    return out


def score_map_reference(t: PartTemplate, omap: OrientationMap, region) -> np.ndarray:
    """Brute-force scores: decode every mask bit by bit at every location."""
    x0, y0, x1, y1 = _clip_region(region, omap)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    acc = np.zeros(ys.shape, dtype=np.int64)
    for dx, dy, b in t.features.tolist():
        masks = _mask_lookup(omap, ys + dy, xs + dx)
        val = np.zeros(ys.shape, dtype=np.int64)
        for j in range(N_BINS):
            has = ((masks >> j) & 1).astype(bool)
            val = np.where(has, np.maximum(val, _similarity(b, j)), val)
        acc = acc + val
    return acc / (SIM_LEVELS * t.n_features)


def score_map_fast(t: PartTemplate, omap: OrientationMap, region) -> np.ndarray:
    """Scores from per-bin response maps: one slice-add per feature."""
    x0, y0, x1, y1 = _clip_region(region, omap)
    resp = omap.responses()
    p = MAX_TEMPLATE_HALF
    r0, c0 = omap.origin
    hh, ww = y1 - y0, x1 - x0
    acc = np.zeros((max(hh, 0), max(ww, 0)), dtype=np.int16)
    if hh <= 0 or ww <= 0:
        return acc.astype(np.float64)
    ph, pw = resp.shape[1:]
    for dx, dy, b in t.features.tolist():
        ys = y0 + dy - r0 + p
        xs = x0 + dx - c0 + p
        ye, xe = ys + hh, xs + ww
        if ys >= 0 and xs >= 0 and ye <= ph and xe <= pw:
            acc += resp[b, ys:ye, xs:xe]
        else:
            # the window leaves the padded map: only the overlap contributes
            sy0, sx0 = max(ys, 0), max(xs, 0)
            sy1, sx1 = min(ye, ph), min(xe, pw)
            if sy1 > sy0 and sx1 > sx0:
                acc[sy0 - ys : sy1 - ys, sx0 - xs : sx1 - xs] += resp[b, sy0:sy1, sx0:sx1]
    return acc / (SIM_LEVELS * t.n_features)


_DISK_CACHE: dict = {}


def _disk_offsets(radius: int) -> tuple:
    """(dy, dx) integer offsets of the closed disk of the given radius."""
    d = _DISK_CACHE.get(radius)
    if d is None:
        yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
        inside = (xx * xx + yy * yy) <= radius * radius
        d = (yy[inside], xx[inside])
        _DISK_CACHE[radius] = d
    return d


def select_candidates(
    scores: np.ndarray,
    origin_xy: tuple,
    part_id: int,
    k: int,
    nms_radius: int = 4,
    plateau_radius: int = 8,
) -> list:
    """Top-k peaks with non-maximum suppression.

    Peaks are taken in descending score, ties broken by smaller row then
    smaller column.  Each candidate reports the centroid of the connected set
    of locations tied with its peak, and suppresses that set dilated by the
    NMS radius.
    """
    if scores.size == 0 or k < 1:
        return []
    x0, y0 = origin_xy
    h, w = scores.shape
    work = scores.copy()
    out = []
    ddy, ddx = _disk_offsets(nms_radius)
    for rank in range(1, k + 1):
        flat = int(np.argmax(work))
        r, c = divmod(flat, w)
        if work[r, c] == -np.inf:
            break
        peak = scores[r, c]
        wr0, wr1 = max(0, r - plateau_radius), min(h, r + plateau_radius + 1)
        wc0, wc1 = max(0, c - plateau_radius), min(w, c + plateau_radius + 1)
        tied = (scores[wr0:wr1, wc0:wc1] == peak) & (work[wr0:wr1, wc0:wc1] != -np.inf)
        if np.count_nonzero(tied) == 1:
            comp = tied
        else:
            labels, _ = ndimage.label(tied)
            comp = labels == labels[r - wr0, c - wc0]
        cy, cx = np.nonzero(comp)
        loc = (x0 + wc0 + float(cx.mean()), y0 + wr0 + float(cy.mean()))
        out.append(
            MatchCandidate(
                part_id=int(part_id),
                location=loc,
                score=float(peak),
                rank=rank,
                peak=(x0 + c, y0 + r),
            )
        )
        # suppress the plateau grown by the NMS disk (a stamp of the disk at every plateau pixel)
        ys = (cy[:, None] + (wr0 + ddy)).ravel()
        xs = (cx[:, None] + (wc0 + ddx)).ravel()
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        work[ys[keep], xs[keep]] = -np.inf
    return out


def refine_candidates(t: PartTemplate, omap: OrientationMap, candidates, radius: int) -> list:
    """Re-localize candidates within ``radius`` px of their peak on the unspread masks.

    Spreading makes the score flat over a few pixels, so the peak of the
    spread score is only known to about the spreading radius.  Scoring the
    same template against the one-hot orientation masks in that
    neighbourhood recovers the exact alignment.  Only ``location`` changes
    (the centroid of the connected tied set around the best shift); rank,
    score and peak are kept.  Candidates whose neighbourhood has no aligned
    feature keep their location.
    """
    if radius < 1 or not candidates:
        return list(candidates)
    q = omap.quantized
    qh, qw = q.shape
    r0, c0 = omap.origin
    offs = np.arange(-radius, radius + 1)
    sy, sx = np.meshgrid(offs, offs, indexing="ij")
    fx, fy, fb = t.features[:, 0], t.features[:, 1], t.features[:, 2]
    peaks = np.array([c.peak for c in candidates], dtype=np.int64)
    # (candidate, shift row, shift col, feature)
    ys = (peaks[:, 1, None, None, None] - r0) + sy[None, :, :, None] + fy
    xs = (peaks[:, 0, None, None, None] - c0) + sx[None, :, :, None] + fx
    inside = (ys >= 0) & (ys < qh) & (xs >= 0) & (xs < qw)
    masks = np.where(inside, q[np.clip(ys, 0, qh - 1), np.clip(xs, 0, qw - 1)], 0)
    scores = SIM_LUT[fb, masks].sum(axis=-1)
    n = 2 * radius + 1
    out = []
    for c, score in zip(candidates, scores):
        flat = int(np.argmax(score))
        best = score.flat[flat]
        if best <= 0:
            out.append(c)
            continue
        r, col = divmod(flat, n)
        tied = score == best
        if np.count_nonzero(tied) > 1:
            labels, _ = ndimage.label(tied)
            yy, xx = np.nonzero(labels == labels[r, col])
            r, col = float(yy.mean()), float(xx.mean())
        px, py = c.peak
        out.append(replace(c, location=(px - radius + float(col), py - radius + float(r))))
    return out


def match_template(t: PartTemplate, omap: OrientationMap, search_region, k: int = 5, nms_radius: int = 4) -> list:
    """Reference sliding-window matcher; ``search_region = (x0, y0, x1, y1)`` of anchor positions."""
    x0, y0, _, _ = _clip_region(search_region, omap)
    scores = score_map_reference(t, omap, search_region)
    return select_candidates(scores, (x0, y0), t.part_id, k, nms_radius)


def binarize_and_score_fast(
    t: PartTemplate, omap: OrientationMap, search_region, k: int = 5, nms_radius: int = 4
) -> list:
    """Optimized matcher; identical output to ``match_template``."""
    x0, y0, _, _ = _clip_region(search_region, omap)
    scores = score_map_fast(t, omap, search_region)
    return select_candidates(scores, (x0, y0), t.part_id, k, nms_radius)


def match_variants(
    variants: list, omap: OrientationMap, search_region, k: int = 5, nms_radius: int = 4
) -> list:
    """Match several resampled versions of one part; per-location best score wins."""
    x0, y0, _, _ = _clip_region(search_region, omap)
    best = None
    for t in variants:
        s = score_map_fast(t, omap, search_region)
        best = s if best is None else np.maximum(best, s)
    if best is None:
        return []
    return select_candidates(best, (x0, y0), variants[0].part_id, k, nms_radius)
