"""Writer for the portable binary feature format consumed by the trainer.

Byte layout, integers little endian:

    4 bytes  magic "PKBF"
    u32      format version (1)
    u32      grid_h
    u32      grid_w
    u32      dim
    u32      dtype code (0 = float32 little endian)
    u16      image id byte length, then UTF-8 image id
    u16      variant tag (0 = unmasked, 1 = masked)
    [u16     mask id byte length, then UTF-8 mask id]   (masked only)
    payload  grid_h * grid_w * dim float32 values, row major

Writes are atomic: a temp file in the destination directory is renamed into
place, so readers never observe a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"PKBF"
VERSION = 1
DTYPE_F32 = 0


def encode_feature_blob(features: np.ndarray, image_id: str, mask_id: str | None) -> bytes:
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 3:
        raise ValueError(f"features must be (grid_h, grid_w, dim), got {f.shape}")
    gh, gw, dim = f.shape
    ident = image_id.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<IIIII", VERSION, gh, gw, dim, DTYPE_F32),
        struct.pack("<H", len(ident)),
        ident,
    ]
    if mask_id is None:
        parts.append(struct.pack("<H", 0))
    else:
        tag = mask_id.encode("utf-8")
        parts.append(struct.pack("<HH", 1, len(tag)))
        parts.append(tag)
    parts.append(f.tobytes(order="C"))
    return b"".join(parts)


def write_feature_file(features: np.ndarray, image_id: str, mask_id: str | None, path) -> None:
    path = Path(path)
    blob = encode_feature_blob(features, image_id, mask_id)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_text_atomic(text: str, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
