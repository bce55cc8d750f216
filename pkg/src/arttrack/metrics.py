"""Pose and detection metrics, and the per-frame metrics CSV.

One row per (frame, tool).  Per-part detection columns ``det_<part>_<th>px``
hold the 1-based rank of the best-ranked candidate within ``th`` pixels of
the ground-truth keypoint (0 when none of the top-k is close enough, empty
when the part is not visible in the ground truth), so the detection rate
among the top N is the fraction of visible parts with ``0 < rank <= N``.
Wall-clock stage timings go to a separate file so that the metrics CSV is
reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .errors import MissingColumn
from .geometry import N_KEYPOINTS, RigidTransform, matrix_to_euler, rotation_angle

SCHEMA_VERSION = 1
THRESHOLDS = (5, 10, 20)
STATE_NAMES = ("theta_x", "theta_y", "theta_z", "r_x", "r_y", "r_z")


def pose_errors(est: RigidTransform, truth: RigidTransform) -> tuple:
    """(translation mm, geodesic rotation rad, |Euler angles| of the relative rotation)."""
    t_err = float(np.linalg.norm(est.translation - truth.translation))
    rel = truth.rotation.T @ est.rotation
    r_err = rotation_angle(rel)
    axes = np.abs(matrix_to_euler(rel))
    return t_err, r_err, axes


def first_hit_ranks(detections: dict, keypoints, visible, thresholds=THRESHOLDS) -> dict:
    """``{(part, threshold): rank}`` for every ground-truth-visible part.

    ``rank`` is the smallest candidate rank within the threshold, 0 for a miss
    (including parts that produced no candidates).
    """
    out = {}
    kp = np.asarray(keypoints, dtype=np.float64)
    for pid in np.flatnonzero(np.asarray(visible, dtype=bool)):
        cands = detections.get(int(pid), ())
        for th in thresholds:
            rank = 0
            for c in cands:
                if math.hypot(c.location[0] - kp[pid, 0], c.location[1] - kp[pid, 1]) < th:
                    rank = c.rank
                    break
            out[(int(pid), th)] = rank
    return out


def detection_rate(ranks: list, top_n: int, threshold: int) -> float:
    """Fraction of (frame, part) entries whose first-hit rank is within the top N."""
    vals = [r for r in ranks if r is not None]
    if not vals:
        return float("nan")
    return sum(1 for r in vals if 0 < r <= top_n) / len(vals)


def columns(k: int) -> list:
    cols = ["frame", "tool", "status", "t_err_mm", "r_err_rad", "ax_err_x", "ax_err_y", "ax_err_z",
            "inliers", "n_templates", "n_visible"]
    cols += [f"x_{n}" for n in STATE_NAMES]
    cols += [f"p_{n}" for n in STATE_NAMES]
    cols += [f"det_{p}_{th}px" for p in range(N_KEYPOINTS) for th in THRESHOLDS]
    return cols


TIMING_COLUMNS = ["frame", "tool", "render_ms", "match_ms", "verify_ms", "ekf_ms", "total_ms"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def frame_rows(result, truths) -> list:
    """Metric rows (dicts) for one ``FrameResult``; ``truths`` is the frame's ground truth or None."""
    rows = []
    for r in result.tools:
        row = {"frame": result.index, "tool": r.tool, "status": r.status,
               "inliers": r.inlier_count, "n_templates": r.n_templates}
        for n, v in zip(STATE_NAMES, r.x):
            row[f"x_{n}"] = float(v)
        for n, v in zip(STATE_NAMES, r.p_diag):
            row[f"p_{n}"] = float(v)
        g = truths[r.tool] if truths is not None else None
        if g is not None:
            te, re, ax = pose_errors(r.t_e_c, g.t_e_c)
            row.update(t_err_mm=te, r_err_rad=re, ax_err_x=float(ax[0]), ax_err_y=float(ax[1]),
                       ax_err_z=float(ax[2]), n_visible=int(g.visible.sum()))
            for (pid, th), rank in first_hit_ranks(r.detections, g.keypoints, g.visible).items():
                row[f"det_{pid}_{th}px"] = rank
        rows.append(row)
    return rows


def timing_rows(result) -> list:
    return [
        {"frame": result.index, "tool": r.tool, "render_ms": r.timings.render, "match_ms": r.timings.match,
         "verify_ms": r.timings.verify, "ekf_ms": r.timings.ekf, "total_ms": r.timings.total}
        for r in result.tools
    ]


def summarize(rows: list, k: int, first_frame: int = 0) -> dict:
    """Mean/std pose errors and top-N detection rates over rows with ground truth."""
    sel = [r for r in rows if int(r["frame"]) >= first_frame]
    te = np.array([float(r["t_err_mm"]) for r in sel if _present(r.get("t_err_mm"))])
    re = np.array([float(r["r_err_rad"]) for r in sel if _present(r.get("r_err_rad"))])
    out = {
        "frames": len({int(r["frame"]) for r in sel}),
        "translation_mm": (float(te.mean()), float(te.std())) if te.size else (float("nan"),) * 2,
        "rotation_rad": (float(re.mean()), float(re.std())) if re.size else (float("nan"),) * 2,
    }
    for ax in ("x", "y", "z"):
        a = np.array([float(r[f"ax_err_{ax}"]) for r in sel if _present(r.get(f"ax_err_{ax}"))])
        out[f"axis_{ax}_rad"] = (float(a.mean()), float(a.std())) if a.size else (float("nan"),) * 2
    rates = {}
    for th in THRESHOLDS:
        ranks = []
        for r in sel:
            for p in range(N_KEYPOINTS):
                v = r.get(f"det_{p}_{th}px")
                if _present(v):
                    ranks.append(int(v))
        for n in range(1, k + 1):
            rates[(n, th)] = detection_rate(ranks, n, th)
    out["detection"] = rates
    return out


def _present(v) -> bool:
    return v is not None and v != ""


def write_csv(stream, rows: list, k: int, summary: dict | None = None) -> None:
    cols = columns(k)
    stream.write(f"# arttrack metrics schema={SCHEMA_VERSION} k={k}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    if summary is not None:
        for line in summary_lines(summary, k):
            stream.write(f"# {line}\n")


def summary_lines(summary: dict, k: int) -> list:
    lines = [
        f"summary frames={summary['frames']}",
        "summary translation_error_mm mean={!r} std={!r}".format(*summary["translation_mm"]),
        "summary rotation_error_rad mean={!r} std={!r}".format(*summary["rotation_rad"]),
    ]
    for ax in ("x", "y", "z"):
        lines.append("summary axis_{}_error_rad mean={!r} std={!r}".format(ax, *summary[f"axis_{ax}_rad"]))
    for th in THRESHOLDS:
        rates = " ".join(f"top{n}={summary['detection'][(n, th)]!r}" for n in range(1, k + 1))
        lines.append(f"summary detection_rate {th}px {rates}")
    return lines


def write_timings(stream, rows: list) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in TIMING_COLUMNS])


def read_csv(path, required=("frame",)) -> tuple:
    """``(rows, meta)`` of a metrics CSV: rows as dicts of strings, ``meta`` from the header comment."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    meta = {}
    lines = []
    for ln in text.splitlines():
        if ln.startswith("# arttrack metrics"):
            for tok in ln.split()[3:]:
                key, _, val = tok.partition("=")
                if val.isdigit():
                    meta[key] = int(val)
        elif ln and not ln.startswith("#"):
            lines.append(ln)
    if not lines:
        raise MissingColumn("empty CSV: no header row")
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    header = reader.fieldnames or []
    for col in required:
        if col not in header:
            raise MissingColumn(f"column {col!r} missing")
    return list(reader), meta
