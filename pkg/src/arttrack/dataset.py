"""Dataset manifest (JSON) plus PGM frames, with bit-exact round trips.

Manifest grammar (version 1), all lengths in mm and angles in radians::

    {
      "version": 1,
      "intrinsics": {"fx": f, "fy": f, "cx": f, "cy": f, "width": i, "height": i},
      "calibration": [16 numbers, row-major T_B^C- (possibly erroneous)],
      "tools": [{ToolModel fields}, ...],
      "frames": [
        {
          "image": "relative/path.pgm",
          "tools": [{"t_e_b": [16 numbers], "joints": {"roll": f, "pitch": f, "yaw": f, "opening": f}}, ...],
          "ground_truth": [                          # optional
            {"t_corr": [16], "t_e_c": [16],
             "keypoints": [[u, v] or null] * 14, "visible": [bool] * 14}, ...
          ]
        }, ...
      ],
      "meta": {...}                                  # optional, free-form
    }

Floats are written with Python's shortest round-trip repr, so
``load_manifest(write_dataset(m, ...))`` reproduces every number exactly.
Key order in the document is irrelevant.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DecodeError,
    DimensionMismatch,
    IoError,
    JointLimitViolation,
    ParseError,
    ValidationError,
    VersionError,
)
from .geometry import N_KEYPOINTS, CameraIntrinsics, RigidTransform, check_rigid
from .pgm import pgm_size, read_pgm, write_pgm
from .renderer import JointState, ToolModel

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ToolKinematics:
    t_e_b: RigidTransform
    joints: JointState


@dataclass(frozen=True, eq=False)
class ToolTruth:
    t_corr: RigidTransform        # true T_C-^C
    t_e_c: RigidTransform         # true tool pose in the camera
    keypoints: np.ndarray         # (14, 2), NaN where the point is behind the camera
    visible: np.ndarray           # (14,) bool

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64).reshape(N_KEYPOINTS, 2)
        vis = np.array(self.visible, dtype=bool).reshape(N_KEYPOINTS)
        kp.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visible", vis)

    def __eq__(self, other):
        if not isinstance(other, ToolTruth):
            return NotImplemented
        return (
            self.t_corr == other.t_corr
            and self.t_e_c == other.t_e_c
            and np.array_equal(self.keypoints, other.keypoints, equal_nan=True)
            and np.array_equal(self.visible, other.visible)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrameRecord:
    image: str
    tools: tuple
    ground_truth: tuple | None = None


@dataclass(frozen=True)
class FrameBundle:
    index: int
    image: np.ndarray = field(compare=False)
    tools: tuple
    ground_truth: tuple | None = None


@dataclass(frozen=True)
class DatasetManifest:
    intrinsics: CameraIntrinsics
    calibration: RigidTransform
    tools: tuple
    frames: tuple
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict, compare=False)
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.frames)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "intrinsics": {
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
                "width": int(self.intrinsics.width),
                "height": int(self.intrinsics.height),
            },
            "calibration": _tf_list(self.calibration),
            "tools": [t.to_dict() for t in self.tools],
            "frames": [_frame_dict(f) for f in self.frames],
            "meta": self.meta,
        }


# -- serialization -------------------------------------------------------------


def _tf_list(t: RigidTransform) -> list:
    return [float(v) for v in t.matrix.reshape(-1)]


def _frame_dict(f: FrameRecord) -> dict:
    d = {
        "image": f.image,
        "tools": [{"t_e_b": _tf_list(k.t_e_b), "joints": k.joints.as_dict()} for k in f.tools],
    }
    if f.ground_truth is not None:
        d["ground_truth"] = [
            {
                "t_corr": _tf_list(g.t_corr),
                "t_e_c": _tf_list(g.t_e_c),
                "keypoints": [
                    None if not np.all(np.isfinite(p)) else [float(p[0]), float(p[1])]
                    for p in g.keypoints
                ],
                "visible": [bool(v) for v in g.visible],
            }
            for g in f.ground_truth
        ]
    return d


def _check_finite(obj, where: str) -> None:
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValidationError(where, "non-finite number")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def write_dataset(manifest: DatasetManifest, images, path) -> Path:
    """Write ``manifest.json`` and one PGM per frame under the directory ``path``.

    ``images`` holds one uint8 array per frame, in manifest order.  Returns the
    manifest path.
    """
    if len(manifest.frames) == 0:
        raise ValidationError("frames", "a dataset needs at least one frame")
    images = list(images)
    if len(images) != len(manifest.frames):
        raise ValidationError("frames", f"{len(manifest.frames)} frames but {len(images)} images")
    doc = manifest.to_dict()
    _check_finite(doc, "manifest")
    # validates transforms, joints and sizes exactly as a load would
    _parse_manifest(doc, None)
    h, w = manifest.intrinsics.shape
    for i, img in enumerate(images):
        if np.asarray(img).shape != (h, w):
            raise ValidationError(f"frames[{i}].image", f"shape {np.asarray(img).shape} != {(h, w)}")
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for f, img in zip(manifest.frames, images):
            target = root / f.image
            target.parent.mkdir(parents=True, exist_ok=True)
            write_pgm(target, img)
        out = root / MANIFEST_NAME
        tmp = root / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n", encoding="utf-8")
        os.replace(tmp, out)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return out


# -- parsing -------------------------------------------------------------------


def _reject_constant(name):
    raise ValueError(f"non-finite constant {name} is not allowed")


def _need(cond, where, reason):
    if not cond:
        raise ValidationError(where, reason)


def _number(v, where) -> float:
    _need(isinstance(v, (int, float)) and not isinstance(v, bool), where, "expected a number")
    _need(math.isfinite(v), where, "non-finite number")
    return float(v)


def _transform(v, where) -> RigidTransform:
    _need(isinstance(v, list) and len(v) == 16, where, "expected 16 numbers (row-major 4x4)")
    m = np.array([_number(x, f"{where}[{i}]") for i, x in enumerate(v)]).reshape(4, 4)
    try:
        check_rigid(m)
    except ValidationError as exc:
        raise ValidationError(where, exc.reason) from None
    return RigidTransform.from_matrix(m, validate=False)


def _obj(v, where, required: tuple, optional: tuple = ()) -> dict:
    _need(isinstance(v, dict), where, "expected an object")
    for key in required:
        _need(key in v, f"{where}.{key}", "missing")
    for key in v:
        _need(key in required or key in optional, f"{where}.{key}", "unknown key")
    return v


def _parse_manifest(doc, root: Path | None) -> DatasetManifest:
    _obj(doc, "manifest", ("version", "intrinsics", "calibration", "tools", "frames"), ("meta",))
    version = doc["version"]
    if not isinstance(version, int) or isinstance(version, bool) or version != FORMAT_VERSION:
        raise VersionError(f"unsupported manifest version {version!r} (expected {FORMAT_VERSION})")

    kd = _obj(doc["intrinsics"], "intrinsics", ("fx", "fy", "cx", "cy", "width", "height"))
    for key in ("width", "height"):
        _need(isinstance(kd[key], int) and not isinstance(kd[key], bool), f"intrinsics.{key}", "expected an integer")
    intr = CameraIntrinsics(
        *(_number(kd[key], f"intrinsics.{key}") for key in ("fx", "fy", "cx", "cy")),
        kd["width"],
        kd["height"],
    )
    calib = _transform(doc["calibration"], "calibration")

    _need(isinstance(doc["tools"], list) and len(doc["tools"]) >= 1, "tools", "expected a non-empty list")
    tools = []
    for i, td in enumerate(doc["tools"]):
        _need(isinstance(td, dict), f"tools[{i}]", "expected an object")
        try:
            tools.append(ToolModel.from_dict(td))
        except KeyError as exc:
            raise ValidationError(f"tools[{i}].{exc.args[0]}", "unknown key") from None
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"tools[{i}]", str(exc)) from None

    frames_doc = doc["frames"]
    _need(isinstance(frames_doc, list), "frames", "expected a list")
    _need(len(frames_doc) >= 1, "frames", "a dataset needs at least one frame")
    frames = []
    for fi, fd in enumerate(frames_doc):
        where = f"frames[{fi}]"
        _obj(fd, where, ("image", "tools"), ("ground_truth",))
        _need(isinstance(fd["image"], str) and fd["image"], f"{where}.image", "expected a file name")
        _need(isinstance(fd["tools"], list) and len(fd["tools"]) == len(tools), f"{where}.tools",
              f"expected {len(tools)} tool entries")
        kin = []
        for ti, kd_ in enumerate(fd["tools"]):
            w2 = f"{where}.tools[{ti}]"
            _obj(kd_, w2, ("t_e_b", "joints"))
            jd = _obj(kd_["joints"], f"{w2}.joints", ("roll", "pitch", "yaw", "opening"))
            joints = JointState(*(_number(jd[n], f"{w2}.joints.{n}") for n in ("roll", "pitch", "yaw", "opening")))
            try:
                tools[ti].check_joints(joints)
            except JointLimitViolation as exc:
                raise ValidationError(f"{w2}.joints.{exc.joint}", "outside joint limits") from None
            kin.append(ToolKinematics(_transform(kd_["t_e_b"], f"{w2}.t_e_b"), joints))
        gt = None
        if "ground_truth" in fd and fd["ground_truth"] is not None:
            gl = fd["ground_truth"]
            _need(isinstance(gl, list) and len(gl) == len(tools), f"{where}.ground_truth",
                  f"expected {len(tools)} entries")
            gt = []
            for ti, gd in enumerate(gl):
                w2 = f"{where}.ground_truth[{ti}]"
                _obj(gd, w2, ("t_corr", "t_e_c", "keypoints", "visible"))
                kps = gd["keypoints"]
                _need(isinstance(kps, list) and len(kps) == N_KEYPOINTS, f"{w2}.keypoints",
                      f"expected {N_KEYPOINTS} entries")
                arr = np.full((N_KEYPOINTS, 2), np.nan)
                for ki, p in enumerate(kps):
                    if p is None:
                        continue
                    _need(isinstance(p, list) and len(p) == 2, f"{w2}.keypoints[{ki}]", "expected [u, v] or null")
                    arr[ki] = [_number(p[0], f"{w2}.keypoints[{ki}]"), _number(p[1], f"{w2}.keypoints[{ki}]")]
                vis = gd["visible"]
                _need(isinstance(vis, list) and len(vis) == N_KEYPOINTS and all(isinstance(b, bool) for b in vis),
                      f"{w2}.visible", f"expected {N_KEYPOINTS} booleans")
                gt.append(
                    ToolTruth(
                        _transform(gd["t_corr"], f"{w2}.t_corr"),
                        _transform(gd["t_e_c"], f"{w2}.t_e_c"),
                        arr,
                        np.array(vis, dtype=bool),
                    )
                )
            gt = tuple(gt)
        frames.append(FrameRecord(fd["image"], tuple(kin), gt))

    meta = doc.get("meta", {})
    _need(isinstance(meta, dict), "meta", "expected an object")
    return DatasetManifest(intr, calib, tuple(tools), tuple(frames), version, meta, root)


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest; ``path`` may be the file or its directory."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p.name}:{exc.lineno}:{exc.colno}", exc.msg) from None
    except ValueError as exc:
        raise ParseError(p.name, str(exc)) from None
    manifest = _parse_manifest(doc, p.parent)
    h, w = manifest.intrinsics.shape
    for i, f in enumerate(manifest.frames):
        img = p.parent / f.image
        if not img.is_file():
            raise ValidationError(f"frames[{i}].image", f"file not found: {f.image}")
        try:
            size = pgm_size(img)
        except DecodeError as exc:
            raise ValidationError(f"frames[{i}].image", f"{f.image}: {exc}") from None
        if size != (w, h):
            raise ValidationError(f"frames[{i}].image", f"{f.image} is {size[0]}x{size[1]}, expected {w}x{h}")
    return manifest


def read_frame(manifest: DatasetManifest, index: int) -> FrameBundle:
    if not 0 <= index < len(manifest.frames):
        raise IndexError(f"frame {index} out of range [0, {len(manifest.frames)})")
    rec = manifest.frames[index]
    root = manifest.root if manifest.root is not None else Path(".")
    try:
        img = read_pgm(root / rec.image)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if img.shape != manifest.intrinsics.shape:
        raise DimensionMismatch(
            f"{rec.image}: image is {img.shape[1]}x{img.shape[0]}, intrinsics declare "
            f"{manifest.intrinsics.width}x{manifest.intrinsics.height}"
        )
    return FrameBundle(index, img, rec.tools, rec.ground_truth)


def iter_frames(manifest: DatasetManifest, start: int = 0, stop: int | None = None):
    stop = len(manifest.frames) if stop is None else min(stop, len(manifest.frames))
    for i in range(start, stop):
        yield read_frame(manifest, i)
