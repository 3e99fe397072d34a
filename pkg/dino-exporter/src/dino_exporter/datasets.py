"""Dataset discovery: a manifest.json if present, else a directory of images.

A manifest lists image ids, image paths, and (optionally) ground-truth mask
paths and boxes; those annotations are passed through to the exported
manifest untouched.  Without a manifest every image file directly under the
root (or its ``images/`` subdirectory) becomes an entry named by its stem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import ExporterError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    image_path: Path
    gt_mask_path: Path | None = None
    gt_boxes: list[list[int]] | None = None


@dataclass(frozen=True)
class Dataset:
    entries: tuple[ImageEntry, ...]
    source: str = field(default="directory")  # "manifest" or "directory"


def _from_manifest(path: Path) -> Dataset:
    doc = json.loads(path.read_text())
    root = path.parent

    def resolve(rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else root / p

    entries = []
    for item in doc.get("images", []):
        boxes = item.get("ground_truth_boxes")
        entries.append(
            ImageEntry(
                image_id=item["image_id"],
                image_path=resolve(item["image_path"]),
                gt_mask_path=resolve(item.get("ground_truth_mask_path")),
                gt_boxes=[list(map(int, b)) for b in boxes] if boxes is not None else None,
            )
        )
    if not entries:
        raise ExporterError(f"manifest {path} lists no images")
    return Dataset(entries=tuple(sorted(entries, key=lambda e: e.image_id)), source="manifest")


def _from_directory(root: Path) -> Dataset:
    for candidate in (root, root / "images"):
        if candidate.is_dir():
            paths = sorted(
                p for p in candidate.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
            )
            if paths:
                entries = tuple(ImageEntry(image_id=p.stem, image_path=p) for p in paths)
                return Dataset(entries=entries, source="directory")
    raise ExporterError(f"no images found under {root}")


def discover(dataset_root) -> Dataset:
    root = Path(dataset_root)
    if root.is_file() and root.suffix == ".json":
        return _from_manifest(root)
    if not root.is_dir():
        raise ExporterError(f"dataset root {root} does not exist")
    manifest = root / "manifest.json"
    if manifest.is_file():
        return _from_manifest(manifest)
    return _from_directory(root)
