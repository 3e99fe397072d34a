"""Dense-grid primitives: images, masks, resampling, normalization, PNG I/O.

Conventions used across the package: row-major float32 arrays, images are
(H, W, 3), masks are (H, W). Binary masks hold exactly {0, 1}. Boxes are
inclusive pixel coordinates (x_min, y_min, x_max, y_max).
"""

from __future__ import annotations

import functools
from typing import NamedTuple

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WORKING_RESOLUTION = 224
MIN_IMAGE_SIDE = 8


class ShapeError(ValueError):
    """Grid shapes do not line up."""


class BoundingBox(NamedTuple):
    """Axis-aligned box with inclusive integer pixel extents."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)


def check_image(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    return a


def check_mask(mask: np.ndarray) -> np.ndarray:
    a = np.asarray(mask)
    if a.ndim != 2:
        raise ShapeError(f"mask must be (H, W), got {a.shape}")
    return a


def check_binary_mask(mask: np.ndarray) -> np.ndarray:
    a = check_mask(mask)
    bad = (a != 0) & (a != 1)
    if bad.any():
        raise ValueError("binary mask holds values outside {0, 1}")
    return a


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict threshold: 1 iff value > threshold (exactly threshold maps
    to 0). Idempotent for thresholds in (0, 1)."""
    m = check_mask(mask)
    return (m > threshold).astype(np.float32)


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hide image pixels where the mask is 0 (elementwise product per channel)."""
    img = check_image(image)
    m = check_binary_mask(mask)
    if img.shape[:2] != m.shape:
        raise ShapeError(f"image {img.shape[:2]} vs mask {m.shape}")
    return (img * m[:, :, None]).astype(img.dtype, copy=False)


@functools.lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel-centre sampling (corner alignment disabled), clamped at borders.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    w.flags.writeable = False
    return w


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a (H, W) or (H, W, C) grid.

    Output values stay within [min, max] of the input; a same-size resize
    returns an identical copy.
    """
    a = np.asarray(grid)
    if a.ndim not in (2, 3):
        raise ShapeError(f"expected 2-D or 3-D grid, got shape {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    h, w = a.shape[:2]
    if (out_h, out_w) == (h, w):
        return a.copy()
    wh = _interp_matrix(h, out_h)
    ww = _interp_matrix(w, out_w)
    a64 = a.astype(np.float64, copy=False)
    out = np.tensordot(wh, a64, axes=(1, 0))
    out = np.tensordot(ww, out, axes=(1, 1))
    out = np.swapaxes(out, 0, 1)
    out = np.clip(out, a64.min(), a64.max())
    return out.astype(a.dtype, copy=False)


def resize_bilinear_adjoint(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Exact transpose of resize_bilinear: pull upstream gradients back to
    the (in_h, in_w) source grid."""
    g = np.asarray(grad)
    if g.ndim not in (2, 3):
        raise ShapeError(f"expected 2-D or 3-D grid, got shape {g.shape}")
    out_h, out_w = g.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return g.copy()
    wh = _interp_matrix(in_h, out_h)
    ww = _interp_matrix(in_w, out_w)
    g64 = g.astype(np.float64, copy=False)
    out = np.tensordot(wh.T, g64, axes=(1, 0))
    out = np.tensordot(ww.T, out, axes=(1, 1))
    out = np.swapaxes(out, 0, 1)
    return out.astype(g.dtype, copy=False)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (H, W) mask; binary inputs stay binary."""
    a = check_mask(mask)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    h, w = a.shape
    if (out_h, out_w) == (h, w):
        return a.copy()
    rows = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    return a[rows[:, None], cols[None, :]]


def normalize_image(
    raw: np.ndarray,
    mean: tuple[float, float, float] = IMAGENET_MEAN,
    std: tuple[float, float, float] = IMAGENET_STD,
) -> np.ndarray:
    """Map 8-bit-range pixels to (raw / 255 - mean) / std, float32."""
    img = check_image(raw)
    m = np.asarray(mean, dtype=np.float64)
    s = np.asarray(std, dtype=np.float64)
    if m.shape != (3,) or s.shape != (3,):
        raise ShapeError("mean and std must each hold 3 values")
    if np.any(s <= 0):
        raise ValueError("std entries must be positive")
    out = (img.astype(np.float64) / 255.0 - m) / s
    return out.astype(np.float32)


def load_image_png(path) -> np.ndarray:
    """Read an image file as float32 (H, W, 3) in 0..255."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    if arr.shape[0] < MIN_IMAGE_SIDE or arr.shape[1] < MIN_IMAGE_SIDE:
        raise ValueError(f"image {path} smaller than {MIN_IMAGE_SIDE}px per side")
    return arr


def load_gray_png(path) -> np.ndarray:
    """Read a grayscale image file as float32 (H, W) in 0..255."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32)


def save_image_png(image: np.ndarray, path) -> None:
    img = check_image(image)
    u8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def save_binary_mask_png(mask: np.ndarray, path) -> None:
    m = check_binary_mask(mask)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def save_soft_mask_png(mask: np.ndarray, path) -> None:
    m = check_mask(mask)
    u8 = np.clip(np.rint(np.asarray(m, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PNG")
