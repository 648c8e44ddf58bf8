"""Reader and writer for the portable-anymap family (PGM/PPM).

Binary (P5/P6) and plain ASCII (P2/P3) variants are read; output is always
binary. Pixels come back as float32 in [0, 1], shaped (H, W, C).
"""

from __future__ import annotations

import os
import re

import numpy as np

_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


class PNMError(ValueError):
    """Malformed or unsupported portable-anymap data."""


def _header_tokens(buf: bytes, pos: int, count: int):
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = n if nl < 0 else nl
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise PNMError(f"unsupported magic {magic!r}")
    channels = _CHANNELS[magic]
    (width, height, maxval), pos = _header_tokens(buf, 2, 3)
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise PNMError("non-numeric header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PNMError(f"bad header values {width}x{height} maxval {maxval}")
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        # exactly one whitespace byte separates header and raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        raster = buf[pos : pos + need]
        if len(raster) < need:
            raise PNMError(f"raster truncated: expected {need} bytes, found {len(raster)}")
        values = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    else:
        body = re.sub(rb"#[^\n]*", b" ", buf[pos:]).split()
        if len(body) < count:
            raise PNMError(f"raster truncated: expected {count} samples, found {len(body)}")
        try:
            values = np.array([int(v) for v in body[:count]], dtype=np.float64)
        except ValueError as exc:
            raise PNMError("non-numeric sample in ASCII raster") from exc
    if values.max(initial=0) > maxval:
        raise PNMError(f"sample exceeds maxval {maxval}")
    return (values / maxval).astype(np.float32).reshape(height, width, channels)


def read(path) -> np.ndarray:
    """Load a PGM/PPM file as an (H, W, C) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode(buf)
    except PNMError as exc:
        raise PNMError(f"{os.fspath(path)}: {exc}") from None


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(image: np.ndarray) -> bytes:
    """Encode (H, W), (H, W, 1) or (H, W, 3) data as binary P5/P6, maxval 255.

    Float input is treated as [0, 1] intensity; uint8 input is written as is.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise PNMError(f"cannot encode array of shape {arr.shape}")
    raster = arr if arr.dtype == np.uint8 else to_bytes(arr)
    magic = b"P5" if arr.shape[2] == 1 else b"P6"
    height, width = arr.shape[:2]
    return magic + f"\n{width} {height}\n255\n".encode("ascii") + raster.tobytes()


def write(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(image))
