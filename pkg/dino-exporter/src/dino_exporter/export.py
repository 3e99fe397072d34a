"""Export job: frozen features for every image, unmasked plus masked variants.

For each image: resize to the working resolution (224), normalize with the
standard ImageNet statistics, forward through the frozen backbone, and write
the selected per-patch features (28x28x384 for 224 input) to a feature file.
Masked variants multiply the mask into the resized RGB pixels (hidden pixels
become black) before normalization; the chosen mask id is recorded in the
file and manifest.  Image-level failures are logged and skipped; the job
continues and reports them.

Deterministic: weights are frozen, inference mode throughout, and variant v
of the i-th image (in sorted id order) uses bank mask (i * variants + v)
modulo the bank size.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import ExporterError
from .datasets import Dataset, ImageEntry, discover
from .masks import MaskRecord, build_bank
from .pkbf import write_feature_file, write_text_atomic
from .vit import FEATURE_SOURCES, VisionTransformer, build_vit_s8, load_weights

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RESOLUTION = 224


@dataclass(frozen=True)
class ExportJob:
    dataset: str
    out_dir: str
    weights: str
    mask_dir: str | None = None
    mask_mode: str = "high"
    variants: int = 8
    source: str = "key"

    def validate(self) -> None:
        if self.variants < 0:
            raise ExporterError(f"variants must be >= 0, got {self.variants}")
        if self.source not in FEATURE_SOURCES:
            raise ExporterError(f"source must be one of {FEATURE_SOURCES}, got {self.source!r}")
        if self.variants > 0 and self.mask_dir is None:
            raise ExporterError("variants > 0 requires a mask directory")


@dataclass
class ExportReport:
    manifest_path: Path
    exported_images: int = 0
    masked_records: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


def load_rgb_resized(path, resolution: int = RESOLUTION) -> np.ndarray:
    """Image file -> (R, R, 3) float32 in 0..255."""
    with Image.open(path) as im:
        im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32)


def normalize_to_tensor(raw: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float32 0..255 -> normalized (1, 3, H, W) float32 tensor."""
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    img = (raw / 255.0 - mean) / std
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))[None]).float()


def compute_features(model: VisionTransformer, raw: np.ndarray, source: str) -> np.ndarray:
    grid = model.grid_features(normalize_to_tensor(raw), source=source)
    return np.ascontiguousarray(grid[0].numpy(), dtype=np.float32)


def _export_one(
    model: VisionTransformer,
    entry: ImageEntry,
    index: int,
    bank: list[MaskRecord],
    job: ExportJob,
    feat_dir: Path,
) -> dict:
    raw = load_rgb_resized(entry.image_path)
    unmasked_rel = f"features/{entry.image_id}.pkbf"
    feats = compute_features(model, raw, job.source)
    write_feature_file(feats, entry.image_id, None, feat_dir / f"{entry.image_id}.pkbf")

    masked_variants = []
    for v in range(job.variants):
        rec = bank[(index * job.variants + v) % len(bank)]
        mask_id = f"{rec.id}#v{v}"
        masked_raw = raw * rec.mask[:, :, None]
        mfeats = compute_features(model, masked_raw, job.source)
        rel = f"features/{entry.image_id}__m{v}.pkbf"
        write_feature_file(mfeats, entry.image_id, mask_id, feat_dir / f"{entry.image_id}__m{v}.pkbf")
        masked_variants.append({"mask_id": mask_id, "feature_path": rel})

    doc: dict = {
        "image_id": entry.image_id,
        "image_path": str(entry.image_path.resolve()),
        "unmasked_feature_path": unmasked_rel,
    }
    if masked_variants:
        doc["masked_variants"] = masked_variants
    if entry.gt_mask_path is not None:
        doc["ground_truth_mask_path"] = str(entry.gt_mask_path.resolve())
    if entry.gt_boxes is not None:
        doc["ground_truth_boxes"] = entry.gt_boxes
    return doc


def run_export(job: ExportJob) -> ExportReport:
    job.validate()
    dataset: Dataset = discover(job.dataset)
    model = build_vit_s8()
    load_weights(model, job.weights)

    bank: list[MaskRecord] = []
    if job.variants > 0:
        bank = build_bank(job.mask_dir, job.mask_mode, RESOLUTION)

    out = Path(job.out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    report = ExportReport(manifest_path=out / "manifest.json")
    image_docs = []
    for index, entry in enumerate(dataset.entries):
        try:
            doc = _export_one(model, entry, index, bank, job, feat_dir)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", entry.image_id, exc)
            report.failures.append((entry.image_id, str(exc)))
            continue
        image_docs.append(doc)
        report.exported_images += 1
        report.masked_records += len(doc.get("masked_variants", []))
    if not image_docs:
        raise ExporterError("every image failed to export; refusing to write an empty manifest")

    manifest = {
        "version": 1,
        "encoder": "vit-s/8",
        "feature_source": job.source,
        "weights": str(Path(job.weights).resolve()),
        "resolution": RESOLUTION,
        "variants": job.variants,
        "images": image_docs,
    }
    if job.variants > 0:
        manifest["mask_mode"] = job.mask_mode
        manifest["mask_dir"] = str(Path(job.mask_dir).resolve())
    write_text_atomic(json.dumps(manifest, indent=2, sort_keys=True) + "\n", report.manifest_path)
    logger.info(
        "exported %d images (%d masked records), %d failures",
        report.exported_images, report.masked_records, len(report.failures),
    )
    return report
