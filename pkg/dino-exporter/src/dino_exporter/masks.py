"""Occlusion mask bank: value 1 keeps a pixel, 0 hides it.

Mode ``high`` keeps masks hiding strictly more than half the pixels at the
working resolution; ``low`` keeps the complement set.  Matches the bank
semantics of the training package so both tools select the same masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import ExporterError

MASK_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class MaskRecord:
    id: str
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    zero_fraction: float


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return mask[np.ix_(rows, cols)]


def load_mask(path, resolution: int) -> np.ndarray:
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float32)
    binary = (gray >= 0.5 * 255.0).astype(np.float32)
    return resize_nearest(binary, resolution, resolution)


def build_bank(mask_dir, mode: str, resolution: int) -> list[MaskRecord]:
    if mode not in ("high", "low"):
        raise ExporterError(f"mask mode must be 'high' or 'low', got {mode!r}")
    root = Path(mask_dir)
    if not root.is_dir():
        raise ExporterError(f"mask directory {root} does not exist")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in MASK_SUFFIXES)
    if not paths:
        raise ExporterError(f"no mask images under {root}")
    records = []
    for p in paths:
        mask = load_mask(p, resolution)
        zf = float(np.count_nonzero(mask == 0) / mask.size)
        if (zf > 0.5) == (mode == "high"):
            records.append(MaskRecord(id=p.stem, mask=mask, zero_fraction=zf))
    if not records:
        raise ExporterError(f"no masks under {root} satisfy mode={mode!r} (scanned {len(paths)})")
    return records
