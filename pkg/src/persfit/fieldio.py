"""Binary field files and text camera/gravity records.

``.pfld`` layout (all little-endian)::

    8 bytes   magic b"PFLD0001"
    u32       width
    u32       height
    u32       flags (bit 0: confidence grids present)
    f32[H*W]  up_x, up_y, latitude, [conf_up, conf_lat]   row-major grids

Without the confidence flag both confidences read back as 1. Grids are
stored as float32 and promoted to float64 on read.

``.cam`` is one ``key=value`` per line with the keys ``model width height f
cx cy k1 k2``; ``.grav`` is a single line ``gx gy gz``. Floats are written
with 17 significant digits so text round-trips are exact.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .camera import CameraModel, CameraParams
from .errors import BadMagic, InvariantViolation, RecordFormatError, TrailingBytes, TruncatedFile
from .field import PerspectiveField
from .gravity import GravityDir

logger = logging.getLogger(__name__)

MAGIC = b"PFLD0001"
HEADER = struct.Struct("<8sIII")
FLAG_CONFIDENCE = 1
UNIT_NORM_TOL = 1e-3
LAT_LIMIT = float(np.float32(math.pi / 2))
K1_WARN = 0.5
CAM_KEYS = ("model", "width", "height", "f", "cx", "cy", "k1", "k2")

PathOrFile = Union[str, os.PathLike, BinaryIO]


def _first_violation(bad: np.ndarray) -> tuple[int, int]:
    iy, ix = np.argwhere(bad)[0]
    return int(ix), int(iy)


def _validate(up: np.ndarray, lat: np.ndarray, conf: list[np.ndarray]) -> None:
    with np.errstate(invalid="ignore"):
        norm = np.sqrt(up[..., 0] * up[..., 0] + up[..., 1] * up[..., 1])
        bad = ~(np.abs(norm - 1.0) <= UNIT_NORM_TOL)
    if bad.any():
        raise InvariantViolation("up-vector is not unit length", _first_violation(bad))
    bad = ~(np.abs(lat) <= LAT_LIMIT)
    if bad.any():
        raise InvariantViolation("latitude outside [-pi/2, pi/2]", _first_violation(bad))
    for name, c in zip(("conf_up", "conf_lat"), conf):
        bad = ~((c >= 0.0) & (c <= 1.0))
        if bad.any():
            raise InvariantViolation(f"{name} outside [0, 1]", _first_violation(bad))


def encode_field(field: PerspectiveField, confidences: bool = True) -> bytes:
    """Serialize ``field``; the confidence grids are omitted if ``confidences`` is false."""
    h, w = field.height, field.width
    grids = [field.up[..., 0], field.up[..., 1], field.latitude]
    if confidences:
        grids += [field.conf_up, field.conf_lat]
    grids32 = [np.ascontiguousarray(g, dtype="<f4") for g in grids]
    up32 = np.stack(grids32[:2], axis=-1).astype(float)
    conf32 = [g.astype(float) for g in grids32[3:]]
    _validate(up32, grids32[2].astype(float), conf32)
    flags = FLAG_CONFIDENCE if confidences else 0
    return HEADER.pack(MAGIC, w, h, flags) + b"".join(g.tobytes() for g in grids32)


def decode_field(data: bytes) -> PerspectiveField:
    if len(data) < HEADER.size:
        if not MAGIC.startswith(data[: len(MAGIC)]):
            raise BadMagic(f"bad magic {data[:len(MAGIC)]!r}")
        raise TruncatedFile(HEADER.size, len(data))
    magic, w, h, flags = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if w == 0 or h == 0:
        raise InvariantViolation(f"empty field {w}x{h}")
    n_grids = 5 if flags & FLAG_CONFIDENCE else 3
    expected = HEADER.size + 4 * n_grids * w * h
    if len(data) < expected:
        raise TruncatedFile(expected, len(data))
    if len(data) > expected:
        raise TrailingBytes(expected, len(data))
    grids = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n_grids, h, w).astype(float)
    up = np.stack([grids[0], grids[1]], axis=-1)
    if n_grids == 5:
        conf = [grids[3], grids[4]]
    else:
        conf = [np.ones((h, w)), np.ones((h, w))]
    _validate(up, grids[2], conf)
    return PerspectiveField(up, grids[2], conf[0], conf[1])


def write_field(field: PerspectiveField, sink: PathOrFile, confidences: bool = True) -> int:
    """Write ``field`` to a path or binary stream; returns the byte count."""
    data = encode_field(field, confidences)
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


def read_field(source: PathOrFile) -> PerspectiveField:
    if isinstance(source, (str, os.PathLike)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    return decode_field(bytes(data))


# ---------------------------------------------------------------------------
# text records
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def format_camera(cam: CameraParams) -> str:
    values = {
        "model": cam.model.value,
        "width": str(cam.width),
        "height": str(cam.height),
        "f": _fmt(cam.f),
        "cx": _fmt(cam.cx),
        "cy": _fmt(cam.cy),
        "k1": _fmt(cam.k1),
        "k2": _fmt(cam.k2),
    }
    return "".join(f"{k}={values[k]}\n" for k in CAM_KEYS)


def parse_camera(text: str) -> CameraParams:
    """Parse a ``.cam`` record; ``cx``/``cy``/``k1``/``k2`` are optional."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise RecordFormatError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in CAM_KEYS:
            raise RecordFormatError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise RecordFormatError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    for key in ("model", "width", "height", "f"):
        if key not in values:
            raise RecordFormatError(f"missing key {key!r}")
    try:
        model = CameraModel(values["model"])
        width, height = int(values["width"]), int(values["height"])
        num = {k: float(values[k]) for k in ("f", "cx", "cy", "k1", "k2") if k in values}
    except ValueError as exc:
        raise RecordFormatError(str(exc)) from exc
    if abs(num.get("k1", 0.0)) > K1_WARN:
        logger.warning("camera record has |k1| = %g > %g", abs(num["k1"]), K1_WARN)
    try:
        return CameraParams(
            width,
            height,
            num["f"],
            num.get("cx"),
            num.get("cy"),
            num.get("k1", 0.0),
            num.get("k2", 0.0),
            model,
        )
    except ValueError as exc:
        raise RecordFormatError(str(exc)) from exc


def write_camera(cam: CameraParams, path) -> None:
    Path(path).write_text(format_camera(cam), encoding="utf-8")


def read_camera(path) -> CameraParams:
    return parse_camera(Path(path).read_text(encoding="utf-8"))


def format_gravity(g: GravityDir) -> str:
    return " ".join(_fmt(v) for v in g.vec) + "\n"


def parse_gravity(text: str) -> GravityDir:
    parts = text.split()
    if len(parts) != 3:
        raise RecordFormatError(f"gravity record needs 3 numbers, got {len(parts)}")
    try:
        return GravityDir([float(p) for p in parts])
    except ValueError as exc:
        raise RecordFormatError(str(exc)) from exc


def write_gravity(g: GravityDir, path) -> None:
    Path(path).write_text(format_gravity(g), encoding="utf-8")


def read_gravity(path) -> GravityDir:
    return parse_gravity(Path(path).read_text(encoding="utf-8"))
