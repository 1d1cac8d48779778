"""Binary PPM (P6, maxval 255) encoding and decoding."""
from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H,W,3) uint8 array as binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back into an (H,W,3) uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM (magic {raw[:2]!r})")
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()
