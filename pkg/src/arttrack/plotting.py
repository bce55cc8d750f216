"""Static SVG figures from a metrics CSV.

Two figures: detection rate against the number of top candidates (one curve
per pixel threshold) and per-axis rotation error bars (mean and std).
Matplotlib runs on the Agg backend, the SVG date stamp is dropped and the id
salt is fixed so the files are reproducible.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
# fixed salt so element ids, and with them the files, repeat across runs
matplotlib.rcParams["svg.hashsalt"] = "arttrack"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MissingColumn  # noqa: E402
from .geometry import N_KEYPOINTS  # noqa: E402
from .metrics import THRESHOLDS, read_csv, summarize  # noqa: E402

_SVG_META = {"Date": None}
REQUIRED = ("frame", "tool", "ax_err_x", "ax_err_y", "ax_err_z") + tuple(
    f"det_{p}_{th}px" for p in range(N_KEYPOINTS) for th in THRESHOLDS
)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_detection_rates(summary: dict, k: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ns = np.arange(1, k + 1)
    for th, marker in zip(THRESHOLDS, ("o", "s", "^")):
        rates = [summary["detection"][(n, th)] * 100.0 for n in ns]
        ax.plot(ns, rates, marker=marker, label=f"{th} px")
    ax.set_xlabel("top N candidates")
    ax.set_ylabel("detection rate (%)")
    ax.set_xticks(ns)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(title="threshold")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_axis_errors(summary: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.6))
    labels = ("x", "y", "z")
    means = [summary[f"axis_{a}_rad"][0] for a in labels]
    stds = [summary[f"axis_{a}_rad"][1] for a in labels]
    ax.bar(labels, means, yerr=stds, capsize=6, color="#6a8caf")
    ax.set_xlabel("rotation axis")
    ax.set_ylabel("error (rad)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_csv(csv_path, out) -> list:
    """Write ``<out>_detection.svg`` and ``<out>_axes.svg``; returns the paths.

    A trailing ``.svg`` on ``out`` is stripped before the suffixes are added.
    """
    rows, meta = read_csv(csv_path, REQUIRED)
    if not rows:
        raise MissingColumn(f"{csv_path}: no data rows")
    k = int(meta.get("k", 5))
    summary = summarize(rows, k)
    base = Path(out)
    if base.suffix == ".svg":
        base = base.with_suffix("")
    return [
        plot_detection_rates(summary, k, base.parent / f"{base.name}_detection.svg"),
        plot_axis_errors(summary, base.parent / f"{base.name}_axes.svg"),
    ]
