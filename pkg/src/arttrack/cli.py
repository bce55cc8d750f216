"""Command-line front end.

Subcommands::

    arttrack simulate  --preset NAME | --scenario FILE  --out DIR
    arttrack track     DATASET --out CSV [--config FILE] [--timings CSV]
    arttrack eval      CSV [--from-frame N] [--json]
    arttrack bench     DATASET [--config FILE] [--repetitions N] [--compare]
    arttrack plot      CSV --out PREFIX
    arttrack config dump [--config FILE]

Tracker settings resolve as command-line flags over the ``--config`` file
over built-in defaults.  Exit codes: 0 success, 2 invalid input, 3 the
tracker never initialized, 4 file system or decoding trouble.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

from . import metrics
from .config import TrackerConfig, dump_config, load_config
from .dataset import iter_frames, load_manifest
from .errors import (
    DecodeError,
    DimensionMismatch,
    InitializationFailed,
    IoError,
    MissingColumn,
    ParseError,
    ValidationError,
    VersionError,
)
from .tracker import Tracker

log = logging.getLogger("arttrack")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INIT = 3
EXIT_IO = 4

_VALIDATION_ERRORS = (ValidationError, ParseError, VersionError, MissingColumn, DimensionMismatch)
_IO_ERRORS = (IoError, DecodeError, OSError)


# -- configuration -------------------------------------------------------------------


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValidationError("--set", f"expected KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            raise ValidationError(f"--set {key}", f"value {raw!r} is not valid JSON") from None
    return out


def resolve_config(args) -> TrackerConfig:
    """Defaults, then the config file, then individual flags."""
    values = TrackerConfig().to_dict()
    if getattr(args, "config", None):
        values.update(load_config(args.config).to_dict())
    for name in ("threads", "k", "search_half", "render_lag"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values.update(_parse_set(getattr(args, "set", None)))
    return TrackerConfig.from_dict(values)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with tracker settings")
    p.add_argument("--threads", type=int, choices=(1, 2), help="1 = sequential, 2 = two-stage pipeline")
    p.add_argument("--k", type=int, help="candidates kept per part")
    p.add_argument("--search-half", type=int, dest="search_half", help="half side of the search window (px)")
    p.add_argument("--render-lag", type=int, dest="render_lag", help="frames between correction and render")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any setting, value in JSON")


# -- subcommands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .scenario import DEFAULT_CALIBRATION, load_scenario, preset, simulate_to

    overrides = {}
    if args.frames is not None:
        overrides["n_frames"] = args.frames
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scenario:
        spec = load_scenario(args.scenario)
        if overrides:
            spec = type(spec).from_dict({**spec.to_dict(), **overrides})
    else:
        spec = preset(args.preset, **overrides)
    manifest, path = simulate_to(spec, args.out, DEFAULT_CALIBRATION)
    log.info("wrote %d frames (%dx%d) to %s", len(manifest.frames), spec.width, spec.height, path)
    return EXIT_OK


def _write_metrics(out: Path, rows: list, k: int, note: str | None = None) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        metrics.write_csv(f, rows, k, metrics.summarize(rows, k))
        if note:
            f.write(f"# {note}\n")


def cmd_track(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.dataset)
    tracker = Tracker(cfg, manifest.intrinsics, manifest.calibration, manifest.tools)
    rows, trows = [], []
    out = Path(args.out)
    code = EXIT_OK
    note = None
    try:
        for res in tracker.run(iter_frames(manifest)):
            rows += metrics.frame_rows(res, manifest.frames[res.index].ground_truth)
            trows += metrics.timing_rows(res)
    except InitializationFailed as exc:
        log.error("initialization failed: %s", exc)
        code, note = EXIT_INIT, f"aborted: {exc}"
    _write_metrics(out, rows, cfg.k, note)
    timings = Path(args.timings) if args.timings else out.with_name(out.stem + "_timings.csv")
    with open(timings, "w", encoding="utf-8", newline="") as f:
        metrics.write_timings(f, trows)
    if code == EXIT_OK:
        for line in metrics.summary_lines(metrics.summarize(rows, cfg.k), cfg.k):
            log.info("%s", line)
    return code


def cmd_eval(args) -> int:
    rows, meta = metrics.read_csv(args.csv, ("frame", "tool", "t_err_mm", "r_err_rad"))
    k = int(meta.get("k", 5))
    summary = metrics.summarize(rows, k, args.from_frame)
    if args.json:
        doc = {key: summary[key] for key in summary if key != "detection"}
        doc["detection"] = {f"top{n}_{th}px": v for (n, th), v in summary["detection"].items()}
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in metrics.summary_lines(summary, k):
            print(line)
    return EXIT_OK


def _bench_once(cfg: TrackerConfig, manifest, frames) -> tuple:
    tracker = Tracker(cfg, manifest.intrinsics, manifest.calibration, manifest.tools)
    t0 = time.perf_counter()
    results = list(tracker.run(iter(frames)))
    wall = time.perf_counter() - t0
    return wall, results


def _stage_medians(results) -> dict:
    out = {}
    for name in ("render", "match", "verify", "ekf"):
        out[f"{name}_ms"] = statistics.median(
            getattr(r.timings, name) for fr in results for r in fr.tools
        )
    return out


def _signature(results) -> list:
    return [(r.tool, r.status, r.x.tobytes()) for fr in results for r in fr.tools]


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(args.dataset)
    n = len(manifest.frames)
    if n < args.min_frames:
        raise ValidationError("dataset", f"benchmark needs at least {args.min_frames} frames, got {n}")
    if args.repetitions < 1:
        raise ValidationError("--repetitions", "must be >= 1")
    # frames are decoded up front so that disk speed does not enter the figures
    frames = list(iter_frames(manifest))
    layouts = (1, 2) if args.compare else (cfg.threads,)
    report = {
        "frames": n,
        "image": [manifest.intrinsics.width, manifest.intrinsics.height],
        "tools": len(manifest.tools),
        "repetitions": args.repetitions,
        "layouts": {},
    }
    signatures = {}
    for threads in layouts:
        c = cfg.merged(threads=threads)
        walls, last = [], None
        for _ in range(args.repetitions):
            wall, last = _bench_once(c, manifest, frames)
            walls.append(wall)
        med = statistics.median(walls)
        name = "sequential" if threads == 1 else "two-stage"
        report["layouts"][name] = {"threads": threads, "hz": n / med, "wall_s": med, **_stage_medians(last)}
        signatures[threads] = _signature(last)
    if args.compare:
        seq, two = report["layouts"]["sequential"], report["layouts"]["two-stage"]
        report["speedup"] = two["hz"] / seq["hz"]
        report["identical"] = signatures[1] == signatures[2]
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_csv

    for path in plot_csv(args.csv, args.out):
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_config_dump(args) -> int:
    print(dump_config(resolve_config(args)))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arttrack", description="Articulated tool tracking harness")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="default", help="named scenario (default: %(default)s)")
    src.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--frames", type=int, help="override the number of frames")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="track a dataset and write the metrics CSV")
    p.add_argument("dataset", help="dataset directory or manifest.json")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--timings", help="stage timings CSV (default: <out>_timings.csv)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="summarize a metrics CSV")
    p.add_argument("csv")
    p.add_argument("--from-frame", type=int, default=0, dest="from_frame", help="ignore earlier frames")
    p.add_argument("--json", action="store_true", help="print JSON instead of summary lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure tracking throughput")
    p.add_argument("dataset")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--compare", action="store_true", help="run both thread layouts and compare outputs")
    p.add_argument("--min-frames", type=int, default=100, dest="min_frames")
    p.add_argument("--out", help="also write the JSON report here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="SVG figures from a metrics CSV")
    p.add_argument("csv")
    p.add_argument("--out", required=True, help="output prefix; writes <prefix>_detection.svg and <prefix>_axes.svg")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="action", required=True)
    d = csub.add_parser("dump", help="print the resolved configuration")
    _add_config_flags(d)
    d.set_defaults(func=cmd_config_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    log.setLevel(level)
    try:
        return args.func(args)
    except InitializationFailed as exc:
        log.error("%s", exc)
        return EXIT_INIT
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except _IO_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
