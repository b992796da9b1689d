"""Tensor files and 8-bit previews.

Tensor file layout::

    b"DPMR" | u32 little-endian header length | UTF-8 JSON header | payload

The header records ``dtype`` (always ``"f32"``), ``shape``, optional
``axes``/``units`` and any user metadata under ``meta``. The payload is
little-endian float32 in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "TensorFormatError", "write_tensor", "read_tensor", "export_image", "to_pgm_pixels"]

MAGIC = b"DPMR"
_DTYPE = np.dtype("<f4")


class TensorFormatError(ValueError):
    pass


def write_tensor(path, data, meta: dict | None = None, *, axes=None, units=None) -> None:
    data = np.asarray(data)
    if data.ndim == 0 or any(n < 1 for n in data.shape):
        raise ValueError(f"tensor shape must be non-empty with all dims >= 1, got {data.shape}")
    arr = data.astype(_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    header = {"dtype": "f32", "shape": list(arr.shape)}
    if axes is not None:
        header["axes"] = list(axes)
    if units is not None:
        header["units"] = units
    header["meta"] = dict(meta or {})
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(arr).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def read_tensor(path, *, with_header: bool = False):
    """Read a tensor file; returns ``(data, meta)`` or ``(data, header)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if not shape or not all(isinstance(n, int) and n >= 1 for n in shape):
        raise TensorFormatError(f"{path}: invalid shape {shape!r}")
    payload = raw[8 + hlen :]
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise TensorFormatError(f"{path}: payload is {len(payload)} bytes, shape {shape} needs {expected}")
    data = np.frombuffer(payload, dtype=_DTYPE).reshape(shape).copy()
    return (data, header) if with_header else (data, header.get("meta", {}))


def to_pgm_pixels(image, scale="minmax") -> np.ndarray:
    """Map an image to uint8.

    ``scale`` is ``"minmax"`` or a ``(lo, hi)`` pair. Values are rounded half
    up after scaling to [0, 255]; a constant image under ``minmax`` maps to 0.
    """
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if isinstance(scale, str):
        if scale != "minmax":
            raise ValueError(f"unknown scale {scale!r}")
        lo, hi = float(img.min()), float(img.max())
    else:
        lo, hi = (float(v) for v in scale)
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_image(image, path, scale="minmax") -> None:
    """Write a 2-D image as binary PGM (P5)."""
    pixels = to_pgm_pixels(image, scale)
    if pixels.ndim != 2:
        raise ValueError("export_image expects a 2-D image")
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
