"""Binary PPM (P6, 8-bit) image I/O."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np


class PPMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        out.append(data[start:pos])
    return out, pos + 1  # one whitespace byte separates header and raster


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = _tokens(data, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"unsupported PPM magic {tokens[0]!r} (only P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PPMError("non-numeric PPM header field") from exc
    if maxval != 255:
        raise PPMError(f"only 8-bit PPM supported, maxval={maxval}")
    n = width * height * 3
    raster = data[pos : pos + n]
    if len(raster) != n:
        raise PPMError(f"PPM raster has {len(raster)} bytes, expected {n}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise PPMError(f"expected uint8 [H, W, 3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: Union[str, Path], img: np.ndarray):
    Path(path).write_bytes(encode_ppm(img))
