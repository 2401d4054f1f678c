"""Binary PGM (P5) image files, the repo's grayscale interchange format."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        if img.dtype.kind == "f":
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        else:
            img = img.astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-d grayscale, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(int(data[i:j]))
        i = j
    i += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raster = np.frombuffer(data[i : i + w * h], dtype=np.uint8)
    if raster.size != w * h:
        raise ValueError(f"{path}: truncated raster")
    return raster.reshape(h, w).copy()
