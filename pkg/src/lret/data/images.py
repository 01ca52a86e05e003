"""8-bit RGB image IO: PNG through Pillow, binary PPM (P6) by hand."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image


class ImageDecodeError(IOError):
    def __init__(self, path, reason: str):
        super().__init__(f"cannot decode image {os.fspath(path)!r}: {reason}")
        self.path = os.fspath(path)


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos)
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed PPM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1  # exactly one whitespace byte before the raster


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ValueError("not a binary PPM (P6)")
    (w, h, maxval), pos = _ppm_tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported (maxval {maxval})")
    raster = buf[pos:pos + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(arr: np.ndarray) -> bytes:
    arr = _as_rgb_u8(arr)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def _as_rgb_u8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected uint8 (H, W, 3) array, got {arr.dtype} {arr.shape}")
    return np.ascontiguousarray(arr)


def read_image(path) -> np.ndarray:
    """Decode to a uint8 (H, W, 3) array; raises :class:`ImageDecodeError` naming the path."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageDecodeError(path, exc.strerror or str(exc)) from exc
    try:
        if buf[:2] == b"P6":
            return decode_ppm(buf)
        import io

        with Image.open(io.BytesIO(buf)) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise ImageDecodeError(path, str(exc) or type(exc).__name__) from exc


def write_image(path, arr: np.ndarray) -> None:
    """Write PNG or PPM depending on the suffix."""
    path = Path(path)
    arr = _as_rgb_u8(arr)
    if path.suffix.lower() in (".ppm", ".pnm"):
        path.write_bytes(encode_ppm(arr))
    elif path.suffix.lower() == ".png":
        Image.fromarray(arr).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image suffix {path.suffix!r}")


def to_float(arr: np.ndarray) -> np.ndarray:
    """Pixel scaling used everywhere: uint8 / 255 -> float32 in [0, 1]."""
    return arr.astype(np.float32) / np.float32(255.0)


def to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
