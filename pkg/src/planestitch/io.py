"""PNG, RSFT tensor and JSON input/output."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

RSFT_MAGIC = b"RSFT"
_HEADER = struct.Struct("<4sIII")


def read_png(path) -> np.ndarray:
    """8-bit gray or color image as floats in [0, 1]; alpha is dropped."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("L" if im.mode in ("1", "I", "I;16", "F") else "RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from None
    if arr.size == 0:
        raise FormatError(f"image {path} is empty")
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    path = Path(path)
    try:
        Image.fromarray(to_uint8(img)).save(path, format="PNG")
    except OSError as exc:
        raise FormatError(f"cannot write image {path}: {exc}") from None


def read_rsft(path) -> np.ndarray:
    """(C, H, W) float32 tensor stored after a 16-byte little-endian header."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise FormatError(f"tensor {path} is shorter than its header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != RSFT_MAGIC:
        raise FormatError(f"tensor {path} lacks the RSFT magic")
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(f"tensor {path} has {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).copy()


def write_rsft(path, tensor) -> None:
    t = np.asarray(tensor, dtype="<f4")
    if t.ndim != 3:
        raise ValueError("RSFT tensors are (C, H, W)")
    Path(path).write_bytes(_HEADER.pack(RSFT_MAGIC, *t.shape) + t.tobytes(order="C"))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not np.isfinite(v):
            return None
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip floats, NaN as null."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    path = Path(path)
    try:
        path.write_text(dumps(obj))
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from None


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read JSON {path}: {exc}") from None
