"""Deterministic synthetic benchmark: colored elliptical blobs on textured
backgrounds, with ground-truth masks and boxes, plus an irregular scribble
library for desk-scale mask banks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import ManifestImage, save_manifest
from .grids import BoundingBox, resize_bilinear, save_binary_mask_png, save_image_png

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 64
    size: int = 224
    blob_count: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (0.09, 0.24)  # fraction of image size
    texture_amplitude: float = 0.05
    background_brightness: tuple[float, float] = (0.06, 0.30)
    blob_brightness: tuple[float, float] = (0.45, 0.98)
    color_margin: float = 0.45  # min RGB distance between blob and mean background
    # small bright speckles that are NOT objects (excluded from ground truth);
    # they sit below patch scale, so their pseudo-labels stay noisy
    distractor_count: tuple[int, int] = (8, 16)
    distractor_radius: tuple[float, float] = (0.008, 0.022)  # fraction of image size
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.size < 16:
            raise ValueError("count >= 1 and size >= 16 required")
        if not (0 < self.radius_range[0] <= self.radius_range[1] < 0.5):
            raise ValueError("radius_range must sit inside (0, 0.5)")


def _textured_background(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    base = rng.uniform(*spec.background_brightness, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(7, 7, 3))
    tex = resize_bilinear(coarse, spec.size, spec.size)
    fine = rng.normal(0.0, 0.25, size=(spec.size, spec.size, 3))
    img = base[None, None, :] + spec.texture_amplitude * (tex + fine)
    return np.clip(img, 0.0, 1.0)


def _blob_color(rng: np.random.Generator, background: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    bg = background.reshape(-1, 3).mean(axis=0)
    for _ in range(50):
        c = rng.uniform(*spec.blob_brightness, size=3)
        if np.linalg.norm(c - bg) >= spec.color_margin:
            return c
    return np.clip(bg + 0.6, 0.0, 1.0)


def _render_blob(img, gt, rng, spec: SyntheticSpec):
    size, radius_range = spec.size, spec.radius_range
    r_lo, r_hi = (radius_range[0] * size, radius_range[1] * size)
    rx = rng.uniform(r_lo, r_hi)
    ry = rng.uniform(r_lo, r_hi)
    cx = rng.uniform(rx + 2, size - rx - 3)
    cy = rng.uniform(ry + 2, size - ry - 3)
    color = _blob_color(rng, img, spec)
    yy, xx = np.mgrid[0:size, 0:size]
    rho = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    # ~1.5px anti-aliased falloff at the rim
    alpha = np.clip((1.0 - rho) * min(rx, ry) / 1.5, 0.0, 1.0)
    img[:] = img * (1.0 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    inside = (rho <= 1.0).astype(np.float32)
    gt[:] = np.maximum(gt, inside)
    ys, xs = np.nonzero(inside)
    box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    return box, (cx, cy, rx, ry)


def _render_distractors(img, rng, spec: SyntheticSpec) -> None:
    lo, hi = spec.distractor_count
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    size = spec.size
    r_lo, r_hi = spec.distractor_radius[0] * size, spec.distractor_radius[1] * size
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n):
        r = rng.uniform(r_lo, r_hi)
        cx = rng.uniform(r + 1, size - r - 2)
        cy = rng.uniform(r + 1, size - r - 2)
        color = _blob_color(rng, img, spec)
        rho = np.sqrt(((xx - cx) / r) ** 2 + ((yy - cy) / r) ** 2)
        alpha = np.clip((1.0 - rho) * r / 1.5, 0.0, 1.0)
        img[:] = img * (1.0 - alpha[..., None]) + color[None, None, :] * alpha[..., None]


def gen_synth(spec: SyntheticSpec, out_dir) -> Path:
    """Write images/, gt_masks/ and manifest.json; returns the manifest path.

    Fully determined by spec.seed: same spec, same bytes.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt_masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.count):
        img = _textured_background(rng, spec)
        gt = np.zeros((spec.size, spec.size), dtype=np.float32)
        _render_distractors(img, rng, spec)
        n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
        boxes = []
        for _ in range(n_blobs):
            box, _geom = _render_blob(img, gt, rng, spec)
            boxes.append(box)
        image_id = f"img_{i:04d}"
        save_image_png(img * 255.0, out / "images" / f"{image_id}.png")
        save_binary_mask_png(gt, out / "gt_masks" / f"{image_id}.png")
        entries.append(
            ManifestImage(
                image_id=image_id,
                image_path=f"images/{image_id}.png",
                ground_truth_mask_path=f"gt_masks/{image_id}.png",
                ground_truth_boxes=boxes,
            )
        )
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, entries, meta={"dataset_id": f"synth-{spec.seed}-{spec.count}"})
    logger.info("wrote %d synthetic images under %s", spec.count, out)
    return manifest_path


def _stamp_disk(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    size = mask.shape[0]
    r = int(np.ceil(radius))
    y0, y1 = max(0, int(cy) - r), min(size, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(size, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    mask[y0:y1, x0:x1][inside] = 0.0


def gen_scribble_library(out_dir, count: int, size: int, seed: int) -> list[Path]:
    """Irregular masks from seeded random walks with varying brush radius.

    Alternates between heavy coverage (hiding well over half the pixels) and
    light coverage, so both bank modes stay buildable. 0 hides, 255 keeps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        target_hidden = rng.uniform(0.55, 0.8) if i % 2 == 0 else rng.uniform(0.15, 0.42)
        mask = np.ones((size, size), dtype=np.float32)
        guard = 0
        while np.mean(mask == 0) < target_hidden and guard < 400:
            guard += 1
            cy, cx = rng.uniform(0, size, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(size * 0.02, size * 0.08)
            steps = int(rng.integers(8, 40))
            for _ in range(steps):
                _stamp_disk(mask, cy, cx, radius)
                angle += rng.normal(0, 0.5)
                step = radius * 0.8
                cy += step * np.sin(angle)
                cx += step * np.cos(angle)
                if not (0 <= cy < size and 0 <= cx < size):
                    break
                if np.mean(mask == 0) >= target_hidden:
                    break
        p = out / f"scribble_{i:03d}.png"
        save_binary_mask_png(mask, p)
        paths.append(p)
    return paths
