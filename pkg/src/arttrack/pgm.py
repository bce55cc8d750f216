"""Minimal 8-bit binary PGM (P5) codec."""

from __future__ import annotations

import re

import numpy as np

from .errors import DecodeError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit image; boolean masks are stored as 0/255."""
    a = np.asarray(image)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    a = np.ascontiguousarray(a, dtype=np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(a.tobytes())


def _header(data: bytes) -> tuple:
    """(width, height, payload offset) of a P5 stream."""
    if not data.startswith(b"P5"):
        raise DecodeError("not a binary PGM (magic P5 missing)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DecodeError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DecodeError(f"malformed PGM header: {exc}") from None
    if w <= 0 or h <= 0:
        raise DecodeError(f"invalid PGM size {w}x{h}")
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}, only 8-bit (255) images are accepted")
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise DecodeError("missing whitespace after PGM header")
    return w, h, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, start = _header(data)
    payload = data[start:]
    if len(payload) < w * h:
        raise DecodeError(f"payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pgm(f.read())


def pgm_size(path) -> tuple:
    """(width, height) from the header alone."""
    with open(path, "rb") as f:
        head = f.read(4096)
    w, h, _ = _header(head)
    return w, h
