"""Binary PPM (P6, maxval 255) image I/O.

Float images in [0, 1] round-trip to uint8 with round-half-away
quantization; values outside [0, 1] are clipped on write.
"""

from __future__ import annotations

import os

import numpy as np


def encode(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    if np.issubdtype(image.dtype, np.floating):
        data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    elif image.dtype == np.uint8:
        data = image
    else:
        raise ValueError(f"unsupported dtype {image.dtype}")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + data.tobytes()


def decode(blob: bytes) -> np.ndarray:
    """Parse a binary PPM into a float32 (H, W, 3) image in [0, 1]."""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(blob):
            raise ValueError("truncated PPM header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise ValueError("unterminated PPM comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            fields.append(blob[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    raster = blob[pos : pos + expected]
    if len(raster) != expected:
        raise ValueError(f"truncated raster: want {expected} bytes, got {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / 255.0


def write_ppm(path: str | os.PathLike, image: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())
