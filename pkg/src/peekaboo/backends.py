"""Frozen feature backends and the PKBF feature-file interchange format.

PKBF byte layout, all integers little endian:

    offset 0   4 bytes  magic "PKBF"
               u32      format version (1)
               u32      grid_h
               u32      grid_w
               u32      dim
               u32      dtype code (0 = float32 little endian)
               u16      image id byte length, then UTF-8 image id
               u16      variant tag (0 = unmasked, 1 = masked)
               [u16     mask id byte length, then UTF-8 mask id]  (masked only)
               payload  grid_h * grid_w * dim float32 values, row major

Backends expose encode() over (H, W, 3) float32 images and never mutate
state after construction; state_hash() fingerprints that state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import BoundingBox, ShapeError, check_image

PKBF_MAGIC = b"PKBF"
PKBF_VERSION = 1
DTYPE_F32 = 0

UNMASKED = "unmasked"
MASKED = "masked"


class PkbfError(Exception):
    """Base error for feature-file problems."""


class BadMagicError(PkbfError):
    pass


class UnsupportedVersionError(PkbfError):
    pass


class TruncatedFileError(PkbfError):
    pass


class FeatureNotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class FeatureRecord:
    image_id: str
    variant: str  # UNMASKED or MASKED
    mask_id: str | None
    features: np.ndarray  # (grid_h, grid_w, dim) float32

    def __post_init__(self):
        if self.variant not in (UNMASKED, MASKED):
            raise ValueError(f"bad variant {self.variant!r}")
        if self.variant == MASKED and self.mask_id is None:
            raise ValueError("masked record needs a mask_id")
        f = np.asarray(self.features)
        if f.ndim != 3:
            raise ShapeError(f"features must be (grid_h, grid_w, dim), got {f.shape}")


def write_feature_file(record: FeatureRecord, path) -> None:
    f = np.ascontiguousarray(record.features, dtype="<f4")
    gh, gw, dim = f.shape
    image_id = record.image_id.encode("utf-8")
    parts = [
        PKBF_MAGIC,
        struct.pack("<IIIII", PKBF_VERSION, gh, gw, dim, DTYPE_F32),
        struct.pack("<H", len(image_id)),
        image_id,
    ]
    if record.variant == UNMASKED:
        parts.append(struct.pack("<H", 0))
    else:
        mask_id = (record.mask_id or "").encode("utf-8")
        parts.append(struct.pack("<HH", 1, len(mask_id)))
        parts.append(mask_id)
    parts.append(f.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_feature_file(path) -> FeatureRecord:
    cur = _Cursor(Path(path).read_bytes(), path)
    if cur.take(4) != PKBF_MAGIC:
        raise BadMagicError(f"{path}: not a PKBF file")
    version = cur.u32()
    if version != PKBF_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {PKBF_VERSION}")
    gh, gw, dim = cur.u32(), cur.u32(), cur.u32()
    dtype_code = cur.u32()
    if dtype_code != DTYPE_F32:
        raise UnsupportedVersionError(f"{path}: unknown dtype code {dtype_code}")
    image_id = cur.take(cur.u16()).decode("utf-8")
    tag = cur.u16()
    if tag == 0:
        variant, mask_id = UNMASKED, None
    elif tag == 1:
        variant, mask_id = MASKED, cur.take(cur.u16()).decode("utf-8")
    else:
        raise UnsupportedVersionError(f"{path}: unknown variant tag {tag}")
    payload = cur.take(gh * gw * dim * 4)
    feats = np.frombuffer(payload, dtype="<f4").reshape(gh, gw, dim).copy()
    return FeatureRecord(image_id=image_id, variant=variant, mask_id=mask_id, features=feats)


class ToyEncoder:
    """Stand-in frozen encoder: a fixed seed-derived random linear projection
    of each patch's pixels, L2-normalized per patch.

    Deterministic for a given (patch, dim, seed); an all-zero patch keeps a
    zero feature vector.
    """

    kind = "toy"

    def __init__(self, patch: int = 8, dim: int = 384, seed: int = 0):
        self.patch = int(patch)
        self.dim = int(dim)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self._projection = rng.standard_normal((3 * self.patch * self.patch, self.dim))

    @property
    def projection(self) -> np.ndarray:
        return self._projection

    def patches_of(self, image: np.ndarray) -> np.ndarray:
        """Flatten an image into (n_patches, 3 * patch^2) row-major patch rows."""
        img = check_image(image)
        h, w, _ = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        tiles = img.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
        return tiles.reshape(gh * gw, 3 * p * p)

    def encode(self, image: np.ndarray, image_id=None, variant=UNMASKED, mask_id=None) -> np.ndarray:
        img = check_image(image)
        h, w, _ = img.shape
        gh, gw = h // self.patch, w // self.patch
        flat = self.patches_of(img).astype(np.float64)
        feats = flat @ self._projection
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = np.where(norms > 0, feats / np.where(norms > 0, norms, 1.0), 0.0)
        return feats.reshape(gh, gw, self.dim).astype(np.float32)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"toy/{self.patch}/{self.dim}/{self.seed}".encode())
        h.update(self._projection.tobytes())
        return h.hexdigest()


class ReplayBackend:
    """Serves precomputed feature grids keyed by (image_id, variant, mask_id)."""

    kind = "replay"

    def __init__(self, records: list[FeatureRecord] | None = None):
        self._store: dict[tuple, np.ndarray] = {}
        self._masked: dict[str, list[str]] = {}
        self.dim: int | None = None
        for rec in records or []:
            self.add(rec)

    @staticmethod
    def _key(image_id: str, variant: str, mask_id: str | None) -> tuple:
        return (image_id, variant, mask_id if variant == MASKED else None)

    def add(self, record: FeatureRecord) -> None:
        key = self._key(record.image_id, record.variant, record.mask_id)
        self._store[key] = np.asarray(record.features, dtype=np.float32)
        if record.variant == MASKED:
            self._masked.setdefault(record.image_id, []).append(record.mask_id)
        if self.dim is None:
            self.dim = int(record.features.shape[2])

    def encode(self, image=None, image_id=None, variant=UNMASKED, mask_id=None) -> np.ndarray:
        key = self._key(image_id, variant, mask_id)
        try:
            return self._store[key]
        except KeyError:
            raise FeatureNotFoundError(
                f"no features for image_id={image_id!r} variant={variant!r} mask_id={mask_id!r}"
            ) from None

    def masked_ids(self, image_id: str) -> list[str]:
        return list(self._masked.get(image_id, []))

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self._store):
            h.update(repr(key).encode())
            h.update(self._store[key].tobytes())
        return h.hexdigest()


@dataclass
class ManifestImage:
    image_id: str
    image_path: str
    unmasked_feature_path: str | None = None
    masked_variants: list[dict] = field(default_factory=list)  # {"mask_id", "feature_path"}
    ground_truth_mask_path: str | None = None
    ground_truth_boxes: list[BoundingBox] | None = None


@dataclass
class Manifest:
    images: list[ManifestImage]
    root: Path
    meta: dict = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    images = []
    for entry in doc["images"]:
        boxes = entry.get("ground_truth_boxes")
        if boxes is not None:
            boxes = [BoundingBox(*map(int, b)) for b in boxes]
        images.append(
            ManifestImage(
                image_id=entry["image_id"],
                image_path=entry["image_path"],
                unmasked_feature_path=entry.get("unmasked_feature_path"),
                masked_variants=list(entry.get("masked_variants", [])),
                ground_truth_mask_path=entry.get("ground_truth_mask_path"),
                ground_truth_boxes=boxes,
            )
        )
    meta = {k: v for k, v in doc.items() if k != "images"}
    return Manifest(images=images, root=path.parent, meta=meta)


def save_manifest(manifest_path, images: list[ManifestImage], meta: dict | None = None) -> None:
    doc = dict(meta or {})
    doc.setdefault("version", 1)
    doc["images"] = []
    for im in images:
        entry: dict = {"image_id": im.image_id, "image_path": im.image_path}
        if im.unmasked_feature_path is not None:
            entry["unmasked_feature_path"] = im.unmasked_feature_path
        if im.masked_variants:
            entry["masked_variants"] = im.masked_variants
        if im.ground_truth_mask_path is not None:
            entry["ground_truth_mask_path"] = im.ground_truth_mask_path
        if im.ground_truth_boxes is not None:
            entry["ground_truth_boxes"] = [list(map(int, b)) for b in im.ground_truth_boxes]
        doc["images"].append(entry)
    Path(manifest_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def replay_from_manifest(manifest: Manifest) -> ReplayBackend:
    backend = ReplayBackend()
    for im in manifest.images:
        if im.unmasked_feature_path:
            backend.add(read_feature_file(manifest.resolve(im.unmasked_feature_path)))
        for var in im.masked_variants:
            backend.add(read_feature_file(manifest.resolve(var["feature_path"])))
    return backend
