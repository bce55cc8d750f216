"""Per-frame tracking loop: render, extract templates, match, verify, filter.

Stage A (``_prepare``) renders the virtual view of every tool from its
kinematic reading and the correction known ``render_lag`` frames earlier, and
extracts the part templates.  Stage B (``_process``) matches the templates in
the camera image around the keypoints predicted by the current correction,
verifies the matches and runs the EKF.  With ``threads=2`` the stages run on
two threads joined by a capacity-1 queue; because stage A only ever reads the
correction of frame ``t - render_lag``, both layouts give identical results.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrackerConfig
from .dataset import FrameBundle
from .ekf import CorrectionState, measurement_fn, predict, update
from .errors import (
    DegenerateConfiguration,
    InitializationFailed,
    InsufficientPoints,
    NonPositiveDepth,
    NoValidObservations,
)
from .geometry import CameraIntrinsics, RigidTransform, compose, pose_from_vector, project_keypoints
from .initialization import solve_correction, template_variants
from .qgo import (
    MAX_TEMPLATE_HALF,
    binarize_and_score_fast,
    compute_orientation_map,
    extract_part_templates,
    match_variants,
    refine_candidates,
    template_roi,
)
from .renderer import ToolInstance, render_scene, pose_tool
from .verification import verify_context

TRACKED = "tracked"
INITIALIZED = "initialized"
FALLBACK = "fallback"
UNINITIALIZED = "uninitialized"
RESET = "reset"

# verified observations needed before they may overrule the filter, on this many frames in a row
RESET_MIN_POINTS = 8
RESET_CONFIRM_FRAMES = 2
OUT_OF_VIEW = "out_of_view"


@dataclass(frozen=True)
class StageTimings:
    render: float = 0.0
    match: float = 0.0
    verify: float = 0.0
    ekf: float = 0.0

    @property
    def total(self) -> float:
        return self.render + self.match + self.verify + self.ekf


@dataclass(frozen=True, eq=False)
class ToolResult:
    tool: int
    status: str
    t_e_c: RigidTransform
    x: np.ndarray
    p_diag: np.ndarray
    inlier_count: int
    n_templates: int
    detections: dict          # part id -> tuple of MatchCandidate (top-k, unfiltered)
    observations: dict        # part id -> (u, v) fed to the filter
    timings: StageTimings = field(default_factory=StageTimings)

    @property
    def kinematics_only(self) -> bool:
        """True when no image evidence corrected this frame's pose."""
        return self.status not in (TRACKED, INITIALIZED)


@dataclass(frozen=True)
class FrameResult:
    index: int
    tools: tuple


@dataclass
class _ToolTrack:
    state: CorrectionState | None = None
    fail_streak: int = 0
    init_attempts: int = 0
    reopen: int = 0      # frames left during which the covariance is held open after a reset
    surprised: int = 0   # consecutive frames whose verified observations contradict the filter

    @property
    def x(self) -> np.ndarray:
        return np.zeros(6) if self.state is None else self.state.x


@dataclass(frozen=True, eq=False)
class _Prepared:
    """Stage A output for one tool."""

    p_b: object                 # KeypointSet from the kinematic reading
    templates: tuple
    virtual_kp: np.ndarray      # (14, 2)
    visible: np.ndarray         # (14,) bool
    render_ms: float


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


class Tracker:
    """Stateful multi-tool tracker.

    ``tool_models`` and ``tool_ids`` select which tools of the kinematic
    stream are tracked (default: all); every frame bundle must carry the full
    kinematic stream so that untracked tools still occlude in the render.
    """

    def __init__(
        self,
        config: TrackerConfig,
        intrinsics: CameraIntrinsics,
        calibration: RigidTransform,
        tool_models,
        tool_ids=None,
    ):
        self.config = config
        self.k = intrinsics
        self.t_cal = calibration
        self.models = tuple(tool_models)
        self.tool_ids = tuple(range(len(self.models))) if tool_ids is None else tuple(tool_ids)
        self.tracks = {i: _ToolTrack() for i in self.tool_ids}
        self._t = 0
        self._history = {}   # sequence index -> {tool id: x after that frame}
        self._lock = threading.Condition()

    # -- stage A -------------------------------------------------------------------

    def _render_corrections(self, t: int) -> dict:
        src = t - self.config.render_lag
        if src < 0:
            return {i: np.zeros(6) for i in self.tool_ids}
        return self._history[src]

    def _prepare(self, frame: FrameBundle, corrections: dict) -> dict:
        cfg = self.config
        instances = [ToolInstance(m, kin.joints, kin.t_e_b) for m, kin in zip(self.models, frame.tools)]
        out = {}
        # one render pass (all tools, shared occlusion) per distinct virtual camera
        scenes = {}
        for i in self.tool_ids:
            t0 = time.perf_counter()
            x = corrections[i]
            key = np.asarray(x).tobytes()
            if key not in scenes:
                t_b_c = compose(pose_from_vector(x), self.t_cal)
                scenes[key] = render_scene(instances, t_b_c, self.k)
            rend = scenes[key].tools[i]
            p_b = pose_tool(self.models[i], frame.tools[i].joints, frame.tools[i].t_e_b)
            templates = ()
            if rend.visibility.any():
                vis = np.flatnonzero(rend.visibility)
                roi = template_roi(rend.keypoints_2d[vis], rend.depths[vis], cfg.base_box, cfg.reference_depth)
                omap = compute_orientation_map(rend.image, cfg.magnitude_threshold, cfg.spread_radius, roi)
                templates = tuple(
                    extract_part_templates(
                        rend, omap, cfg.base_box, cfg.reference_depth, cfg.max_features, cfg.min_features
                    )
                )
            out[i] = _Prepared(p_b, templates, rend.keypoints_2d, rend.visibility, _ms(t0))
        return out

    # -- stage B -------------------------------------------------------------------

    def _search(self, prep: _Prepared, predicted: dict, window_half: int, image, variants: bool) -> dict:
        """Top-k candidates of every template around its predicted keypoint pixel.

        The template is anchored on the rounded virtual keypoint, so each
        candidate is shifted by the keypoint's sub-pixel offset from it.
        """
        templates = prep.templates
        cfg = self.config
        h, w = self.k.shape
        regions = {}
        for t in templates:
            px, py = predicted[t.part_id]
            cx, cy = int(math.floor(px + 0.5)), int(math.floor(py + 0.5))
            x0, y0 = max(0, cx - window_half), max(0, cy - window_half)
            x1, y1 = min(w, cx + window_half + 1), min(h, cy + window_half + 1)
            if x1 > x0 and y1 > y0:
                regions[t.part_id] = (x0, y0, x1, y1)
        if not regions:
            return {}
        reach = max(max(abs(int(v)) for v in t.features[:, :2].reshape(-1)) for t in templates)
        if variants:
            reach = min(MAX_TEMPLATE_HALF, int(math.ceil(reach * max(cfg.init_scales) * 1.5)) + 1)
        reach += 1
        if cfg.refine_locations and not variants:
            reach += cfg.spread_radius
        r0 = min(r[1] for r in regions.values()) - reach
        c0 = min(r[0] for r in regions.values()) - reach
        r1 = max(r[3] for r in regions.values()) + reach
        c1 = max(r[2] for r in regions.values()) + reach
        omap = compute_orientation_map(image, cfg.magnitude_threshold, cfg.spread_radius, (r0, c0, r1, c1))
        refine = cfg.refine_locations and not variants
        det = {}
        for t in templates:
            reg = regions.get(t.part_id)
            if reg is None:
                continue
            if variants:
                vs = template_variants(t, cfg.init_scales, cfg.init_rotations)
                cands = match_variants(vs, omap, reg, cfg.k, cfg.nms_radius)
            else:
                cands = binarize_and_score_fast(t, omap, reg, cfg.k, cfg.nms_radius)
                if refine:
                    cands = refine_candidates(t, omap, cands, cfg.spread_radius)
            dx = float(prep.virtual_kp[t.part_id, 0]) - t.anchor[0]
            dy = float(prep.virtual_kp[t.part_id, 1]) - t.anchor[1]
            det[t.part_id] = tuple(
                replace(c, location=(c.location[0] + dx, c.location[1] + dy)) for c in cands
            )
        return det

    def _verify(self, prep: _Prepared, det: dict):
        cfg = self.config
        pools = {
            pid: [c for c in cands if c.score >= cfg.min_match_score] for pid, cands in det.items()
        }
        pools = {pid: c for pid, c in pools.items() if c}
        virtual = {pid: tuple(prep.virtual_kp[pid]) for pid in pools}
        return verify_context(
            virtual, pools, cfg.inlier_threshold, cfg.max_iterations, cfg.angular_bin, cfg.radial_bin
        )

    def _observations(self, prep: _Prepared, inliers) -> dict:
        obs = {}
        for pid, cand in inliers:
            u, v = cand.location
            if self.k.contains((u, v))[0]:
                obs[pid] = (float(u), float(v))
        return obs

    def _predicted_pixels(self, x, p_b) -> dict | None:
        try:
            uv = project_keypoints(p_b, pose_from_vector(x), self.t_cal, self.k)
        except NonPositiveDepth:
            return None
        return {i: (float(uv[i, 0]), float(uv[i, 1])) for i in range(uv.shape[0])}

    def _try_initialize(self, i: int, track: _ToolTrack, prep: _Prepared, image):
        """Wide multi-variant search plus EPnP; returns (state or None, detections, inlier count, ms)."""
        cfg = self.config
        t0 = time.perf_counter()
        predicted = self._predicted_pixels(track.x, prep.p_b)
        det = {}
        if predicted is not None and prep.templates:
            det = self._search(prep, predicted, cfg.search_half + cfg.init_search_margin, image, True)
        t_match = _ms(t0)
        t0 = time.perf_counter()
        result = self._verify(prep, det) if det else None
        t_verify = _ms(t0)
        t0 = time.perf_counter()
        state = None
        n_in = 0
        obs = {}
        if result is not None and result.success:
            obs = self._observations(prep, result.inliers)
            n_in = len(result.inliers)
            uv = np.full((14, 2), np.nan)
            valid = np.zeros(14, dtype=bool)
            for pid, (u, v) in obs.items():
                uv[pid] = (u, v)
                valid[pid] = True
            try:
                sol = solve_correction(
                    prep.p_b, self.t_cal, self.k, uv, valid, track.x, cfg.init_refine_iterations
                )
                if sol.rms_px <= cfg.init_max_rms:
                    state = CorrectionState.initial(sol.x, cfg.P0, cfg.Q, cfg.pixel_var)
            except (InsufficientPoints, DegenerateConfiguration):
                state = None
        return state, det, n_in, obs, StageTimings(prep.render_ms, t_match, t_verify, _ms(t0))

    def _process_tool(self, i: int, frame: FrameBundle, prep: _Prepared) -> ToolResult:
        cfg = self.config
        track = self.tracks[i]
        kin = frame.tools[i]
        reinit = track.state is not None and cfg.reinit_after > 0 and track.fail_streak >= cfg.reinit_after

        if track.state is None or reinit:
            state, det, n_in, obs, timings = self._try_initialize(i, track, prep, frame.image)
            if state is not None:
                track.state = state
                track.fail_streak = 0
                track.init_attempts = 0
                status = INITIALIZED
            elif track.state is None:
                track.init_attempts += 1
                if track.init_attempts >= cfg.init_max_frames:
                    raise InitializationFailed(
                        f"tool {i}: no verified detection in {track.init_attempts} frames"
                    )
                status = UNINITIALIZED
                obs = {}
            else:
                t0 = time.perf_counter()
                track.state = predict(track.state)
                track.fail_streak += 1
                timings = StageTimings(timings.render, timings.match, timings.verify, timings.ekf + _ms(t0))
                status = FALLBACK
                obs = {}
            return self._result(i, track, kin, status, n_in if status == INITIALIZED else 0,
                                len(prep.templates), det, obs, timings)

        # regular tracking
        t0 = time.perf_counter()
        state = predict(track.state)
        predicted = self._predicted_pixels(state.x, prep.p_b)
        det = {}
        if predicted is not None and prep.templates:
            det = self._search(prep, predicted, cfg.search_half, frame.image, False)
        t_match = _ms(t0)
        t0 = time.perf_counter()
        result = self._verify(prep, det) if det else None
        t_verify = _ms(t0)
        t0 = time.perf_counter()
        inliers = []
        if result is not None:
            if result.success:
                inliers = result.inliers
            elif cfg.partial_fusion and len(result.inliers) >= 3:
                inliers = result.inliers
        obs = self._observations(prep, inliers) if inliers else {}
        status = FALLBACK
        if obs:
            z = np.full((14, 2), np.nan)
            valid = np.zeros(14, dtype=bool)
            for pid, (u, v) in obs.items():
                z[pid] = (u, v)
                valid[pid] = True
            opened = None
            track.surprised = track.surprised + 1 if self._surprised(predicted, z, valid) else 0
            if track.surprised >= RESET_CONFIRM_FRAMES:
                opened = self._open_update(state, z, valid, prep)
                if opened is not None:
                    # templates stay stale for render_lag frames, so keep the filter open until they refresh
                    track.reopen = cfg.render_lag
                    track.surprised = 0
            elif track.reopen > 0:
                track.reopen -= 1
                state = replace(state, P=np.maximum(state.P, cfg.P0))
            if opened is not None:
                state, status = opened, RESET
            else:
                try:
                    state, _ = update(state, z, valid, prep.p_b, self.t_cal, self.k, cfg.gate)
                    status = TRACKED
                except (NoValidObservations, NonPositiveDepth):
                    obs = {}
        else:
            obs = {}
        if not prep.visible.any():
            status = OUT_OF_VIEW
        track.state = state
        track.fail_streak = 0 if status in (TRACKED, RESET) else track.fail_streak + 1
        timings = StageTimings(prep.render_ms, t_match, t_verify, _ms(t0))
        n_in = len(obs) if status in (TRACKED, RESET) else 0
        return self._result(i, track, kin, status, n_in, len(prep.templates), det, obs, timings)

    def _surprised(self, predicted, z, valid) -> bool:
        """Verified observations far from the prediction: the filter has lost the camera.

        A sudden camera or calibration change leaves the filter confident
        and wrong, so the innovations fail the gate and the estimate creeps
        towards the truth at the pace of Q.  The median residual of a
        verified set above ``reset_residual_px`` triggers a covariance reset.
        """
        cfg = self.config
        if cfg.reset_residual_px <= 0 or predicted is None or int(valid.sum()) < RESET_MIN_POINTS:
            return False
        ids = np.flatnonzero(valid)
        pred = np.array([predicted[int(i)] for i in ids])
        return float(np.median(np.hypot(*(z[ids] - pred).T))) > cfg.reset_residual_px

    def _open_update(self, state, z, valid, prep: _Prepared):
        """Update with the covariance reset to P0, kept only if it explains the observations."""
        cfg = self.config
        opened = replace(state, P=np.maximum(state.P, cfg.P0))
        try:
            new, _ = update(opened, z, valid, prep.p_b, self.t_cal, self.k, cfg.gate)
            uv = measurement_fn(new.x, prep.p_b, self.t_cal, self.k).reshape(-1, 2)
        except (NoValidObservations, NonPositiveDepth):
            return None
        ids = np.flatnonzero(valid)
        rms = float(np.sqrt(np.mean(np.sum((z[ids] - uv[ids]) ** 2, axis=1))))
        return new if rms <= cfg.init_max_rms else None

    def _result(self, i, track, kin, status, n_in, n_templates, det, obs, timings) -> ToolResult:
        x = track.x.copy()
        p_diag = np.full(6, np.nan) if track.state is None else np.diag(track.state.P).copy()
        t_e_c = compose(compose(pose_from_vector(x), self.t_cal), kin.t_e_b)
        return ToolResult(i, status, t_e_c, x, p_diag, int(n_in), int(n_templates), det, obs, timings)

    def _process(self, frame: FrameBundle, prepared: dict) -> FrameResult:
        tools = tuple(self._process_tool(i, frame, prepared[i]) for i in self.tool_ids)
        with self._lock:
            self._history[self._t] = {i: self.tracks[i].x.copy() for i in self.tool_ids}
            self._history.pop(self._t - self.config.render_lag - 1, None)
            self._t += 1
            self._lock.notify_all()
        return FrameResult(frame.index, tools)

    # -- driving -------------------------------------------------------------------

    def step(self, frame: FrameBundle) -> FrameResult:
        """Track one frame (all selected tools), running both stages in this thread."""
        prepared = self._prepare(frame, self._render_corrections(self._t))
        return self._process(frame, prepared)

    track_multi = step

    def run(self, frames):
        """Generator of ``FrameResult`` over an iterable of frame bundles."""
        if self.config.threads == 1:
            for fb in frames:
                yield self.step(fb)
            return
        yield from self._run_two_stage(frames)

    def _run_two_stage(self, frames):
        handoff = queue.Queue(maxsize=1)
        stop = threading.Event()
        end = object()
        lag = self.config.render_lag
        start = self._t

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    handoff.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        def producer():
            try:
                for n, fb in enumerate(frames):
                    t = start + n
                    with self._lock:
                        while self._t < t - lag + 1 and not stop.is_set():
                            self._lock.wait(0.05)
                    if stop.is_set():
                        return
                    prepared = self._prepare(fb, self._render_corrections(t))
                    if not put((fb, prepared)):
                        return
                put(end)
            except BaseException as exc:  # surfaced in the consumer
                put(exc)

        worker = threading.Thread(target=producer, name="arttrack-stage-a", daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is end:
                    break
                if isinstance(item, BaseException):
                    raise item
                fb, prepared = item
                yield self._process(fb, prepared)
        finally:
            stop.set()
            with self._lock:
                self._lock.notify_all()
            while worker.is_alive():
                try:
                    handoff.get_nowait()
                except queue.Empty:
                    pass
                worker.join(0.01)
