"""Bank of irregular binary scribble masks ingested from an image directory.

Convention: mask value 1 keeps a pixel, 0 hides it. zero_fraction is the
hidden fraction measured at the working resolution. Mode "high" keeps masks
hiding strictly more than half the pixels, "low" keeps the complement set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import load_gray_png, resize_nearest

logger = logging.getLogger(__name__)

MASK_SUFFIXES = (".png", ".jpg", ".jpeg")


class MaskBankError(RuntimeError):
    """Bank construction or sampling cannot proceed."""


@dataclass(frozen=True)
class MaskRecord:
    id: str
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    zero_fraction: float


@dataclass(frozen=True)
class MaskBank:
    records: tuple[MaskRecord, ...]
    mode: str  # "high" or "low"
    seed: int

    def __len__(self) -> int:
        return len(self.records)


def zero_fraction(mask: np.ndarray) -> float:
    m = np.asarray(mask)
    return float(np.count_nonzero(m == 0) / m.size)


def binarize_raw_mask(gray: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize a 0..255 grayscale mask at threshold (on the 0..1 scale)."""
    g = np.asarray(gray, dtype=np.float32)
    return (g >= threshold * 255.0).astype(np.float32)


def build_bank(mask_dir, mode: str, seed: int, resolution: int = 224) -> MaskBank:
    """Ingest every mask image under mask_dir, resize to the working
    resolution, and keep only those matching the requested mode.

    high: zero_fraction > 0.5 strictly. low: zero_fraction <= 0.5.
    """
    if mode not in ("high", "low"):
        raise ValueError(f"mode must be 'high' or 'low', got {mode!r}")
    root = Path(mask_dir)
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in MASK_SUFFIXES)
    if not paths:
        raise MaskBankError(f"no mask images found under {root}")
    records = []
    for p in paths:
        raw = binarize_raw_mask(load_gray_png(p))
        mask = resize_nearest(raw, resolution, resolution)
        zf = zero_fraction(mask)
        hidden_majority = zf > 0.5
        if hidden_majority == (mode == "high"):
            records.append(MaskRecord(id=p.stem, mask=mask, zero_fraction=zf))
    if not records:
        raise MaskBankError(
            f"no masks under {root} satisfy mode={mode!r} "
            f"(scanned {len(paths)} files)"
        )
    logger.info("mask bank: %d/%d masks kept (mode=%s)", len(records), len(paths), mode)
    return MaskBank(records=tuple(records), mode=mode, seed=seed)


def sample_mask(bank: MaskBank, draw_index: int) -> MaskRecord:
    """Uniform draw from the bank, a pure function of (bank.seed, draw_index).

    Seeding each draw independently keeps the sequence reproducible and lets
    parallel workers split the draw-index space without shared state.
    """
    if not bank.records:
        raise MaskBankError("bank is empty")
    rng = np.random.default_rng((bank.seed, draw_index))
    return bank.records[int(rng.integers(len(bank.records)))]
