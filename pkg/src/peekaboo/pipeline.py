"""Training, inference and evaluation orchestration.

Per training iteration and image: encode the unmasked input, predict a soft
mask, hide a sampled scribble region and predict again through the shared
head, refine both predictions into detached binary targets, and descend the
weighted loss. Only the 1x1 decoder head ever updates; backends are frozen.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backends import (
    MASKED,
    UNMASKED,
    FeatureRecord,
    Manifest,
    ManifestImage,
    ToyEncoder,
    load_manifest,
    replay_from_manifest,
    save_manifest,
    write_feature_file,
)
from .bilateral import BilateralGrid, SolverConfig, solve
from .grids import (
    apply_mask,
    binarize,
    load_gray_png,
    load_image_png,
    normalize_image,
    resize_bilinear,
    resize_bilinear_adjoint,
    resize_nearest,
)
from .head import (
    DecoderParams,
    adam_step,
    config_hash_of,
    cosine_lr,
    head_backward,
    head_forward,
    init_adam,
    init_params,
    save_checkpoint,
)
from .losses import LossConfig, total_loss
from .maskbank import MaskBank, build_bank, sample_mask
from .metrics import (
    EmptyMaskError,
    EvalReport,
    MetricConfig,
    aggregate_row,
    mask_to_box,
    saliency_scores,
)

logger = logging.getLogger(__name__)


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"  # "toy" or "replay"
    patch: int = 8
    dim: int = 384
    encoder_seed: int = 0  # independent of the run seed: ablation runs share features


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-2
    schedule: str = "cosine"  # decays to floor_ratio * lr; or "constant"
    floor_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    out_dir: str
    seed: int = 0
    iterations: int = 500
    batch_size: int = 50
    resolution: int = 224
    augment: bool = True
    checkpoint_every: int = 100
    mask_dir: str | None = None
    mask_mode: str = "high"
    backend: BackendConfig = field(default_factory=BackendConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def needs_masked_branch(self) -> bool:
        return self.loss.enable_mfp or self.loss.enable_pcl

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.resolution % self.backend.patch != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by patch {self.backend.patch}"
            )
        if self.backend.kind not in ("toy", "replay"):
            raise ValueError(f"unknown backend kind {self.backend.kind!r}")
        if self.mask_mode not in ("high", "low"):
            raise ValueError(f"mask_mode must be 'high' or 'low', got {self.mask_mode!r}")
        if not Path(self.manifest).exists():
            raise ValueError(f"manifest not found: {self.manifest}")
        if self.backend.kind == "toy" and self.needs_masked_branch():
            if not self.mask_dir:
                raise ValueError("toy backend with masked losses needs mask_dir")
            if not Path(self.mask_dir).is_dir():
                raise ValueError(f"mask_dir not found: {self.mask_dir}")
        if self.backend.kind == "replay" and self.augment:
            raise ValueError("replay backend serves precomputed features; set augment=false")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")  # bookkeeping, not experiment identity
        return config_hash_of(doc)


_SECTION_TYPES = {
    "backend": BackendConfig,
    "loss": LossConfig,
    "solver": SolverConfig,
    "optim": OptimConfig,
    "metrics": MetricConfig,
}


def _build_section(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key in doc:
            kwargs[key] = _build_section(cls, doc.pop(key))
    kwargs.update(doc)
    return RunConfig(**kwargs)


def load_config(path, **overrides) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(doc)


# --- data ----------------------------------------------------------------------


@dataclass
class DatasetItem:
    image_id: str
    image_raw: np.ndarray  # (R, R, 3) float32 in 0..255
    gt_mask_path: Path | None
    gt_boxes: list | None
    native_shape: tuple[int, int]


def load_dataset(manifest: Manifest, resolution: int) -> list[DatasetItem]:
    items = []
    for im in manifest.images:
        raw = load_image_png(manifest.resolve(im.image_path))
        native = raw.shape[:2]
        raw = resize_bilinear(raw, resolution, resolution)
        items.append(
            DatasetItem(
                image_id=im.image_id,
                image_raw=raw,
                gt_mask_path=(
                    manifest.resolve(im.ground_truth_mask_path)
                    if im.ground_truth_mask_path
                    else None
                ),
                gt_boxes=im.ground_truth_boxes,
                native_shape=native,
            )
        )
    if not items:
        raise ValueError("manifest lists no images")
    return items


def build_backend(backend_cfg: BackendConfig, manifest: Manifest):
    if backend_cfg.kind == "toy":
        return ToyEncoder(backend_cfg.patch, backend_cfg.dim, backend_cfg.encoder_seed)
    return replay_from_manifest(manifest)


# --- augmentation ---------------------------------------------------------------


def _gaussian5(image: np.ndarray, sigma: float) -> np.ndarray:
    from scipy.ndimage import convolve1d

    d = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    k /= k.sum()
    out = convolve1d(image.astype(np.float64), k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    return out.astype(image.dtype)


def augment_image(
    image: np.ndarray,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.1, 3.0),
    blur_prob: float = 0.5,
    blur_sigma: tuple[float, float] = (0.1, 2.0),
) -> np.ndarray:
    """Random rescale with centre crop/pad back to the input size (padding
    with zeros), then an optional 5x5 Gaussian blur."""
    h, w, _ = image.shape
    s = float(rng.uniform(*scale_range))
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    scaled = resize_bilinear(image, nh, nw)
    out = np.zeros_like(image)

    def spans(n_src, n_dst):
        if n_src >= n_dst:
            o = (n_src - n_dst) // 2
            return slice(o, o + n_dst), slice(0, n_dst)
        o = (n_dst - n_src) // 2
        return slice(0, n_src), slice(o, o + n_src)

    sy, dy = spans(nh, h)
    sx, dx = spans(nw, w)
    out[dy, dx] = scaled[sy, sx]
    if rng.uniform() < blur_prob:
        out = _gaussian5(out, float(rng.uniform(*blur_sigma)))
    return out


# --- training --------------------------------------------------------------------


@dataclass
class TrainSummary:
    checkpoint_path: Path
    log_path: Path
    config_hash: str
    iterations: int
    first_total: float
    final_total: float
    solver_nonconverged: int
    images_skipped: int


class _SampleState:
    """Per-run caches; valid only when pixels are deterministic per image."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.features: dict[str, np.ndarray] = {}
        self.grids: dict[str, BilateralGrid] = {}


def _zeta_step(prob_full, grid, cfg: SolverConfig):
    """Like bilateral.zeta but reports solver convergence for run accounting."""
    hard = binarize(prob_full, 0.5)
    refined, converged = solve(grid, hard, np.ones(grid.shape, dtype=np.float32), cfg)
    return binarize(refined, 0.5), converged


def seeded_init(seed: int, dim: int) -> DecoderParams:
    """Initial decoder parameters for a run seed, identical to what train() starts from."""
    s_params, _, _ = np.random.SeedSequence(seed).spawn(3)
    return init_params(dim, s_params)


def train(cfg: RunConfig) -> TrainSummary:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.monotonic()

    manifest = load_manifest(cfg.manifest)
    ds = load_dataset(manifest, cfg.resolution)
    backend = build_backend(cfg.backend, manifest)
    backend_hash = backend.state_hash()

    need_masked = cfg.needs_masked_branch()
    bank: MaskBank | None = None
    if need_masked and cfg.backend.kind == "toy":
        bank = build_bank(cfg.mask_dir, cfg.mask_mode, seed=cfg.seed, resolution=cfg.resolution)
    if need_masked and cfg.backend.kind == "replay":
        missing = [it.image_id for it in ds if not backend.masked_ids(it.image_id)]
        if missing:
            raise ValueError(f"replay store has no masked variants for {missing[:5]}")

    ss = np.random.SeedSequence(cfg.seed)
    s_params, s_data, s_aug = ss.spawn(3)
    dim = backend.dim if cfg.backend.kind == "replay" else cfg.backend.dim
    params = init_params(dim, s_params)
    del s_params  # seeded_init() must stay in lockstep with this derivation
    adam = init_adam(dim, lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    data_rng = np.random.default_rng(s_data)
    aug_rng = np.random.default_rng(s_aug)

    chash = cfg.config_hash()
    cache = _SampleState(enabled=not cfg.augment)
    r = cfg.resolution
    gh = gw = None
    draw_counter = 0
    nonconverged = 0
    skipped = 0
    first_total = None
    final_total = None
    log_path = out / "train_log.jsonl"
    ck_path = out / "checkpoint_final.json"

    def prepare(item: DatasetItem):
        raw = item.image_raw
        if cfg.augment:
            raw = augment_image(raw, aug_rng)
        img = normalize_image(raw)
        if cache.enabled and item.image_id in cache.grids:
            grid = cache.grids[item.image_id]
        else:
            grid = BilateralGrid(img, cfg.solver.sigma_spatial, cfg.solver.sigma_luma, cfg.solver.sigma_chroma)
            if cache.enabled:
                cache.grids[item.image_id] = grid
        if cfg.backend.kind == "toy":
            if cache.enabled and item.image_id in cache.features:
                feats = cache.features[item.image_id]
            else:
                feats = backend.encode(img, image_id=item.image_id)
                if cache.enabled:
                    cache.features[item.image_id] = feats
        else:
            feats = backend.encode(image_id=item.image_id)
        return img, feats, grid

    with open(log_path, "w") as log_file:
        for it in range(cfg.iterations):
            if cfg.optim.schedule == "cosine":
                lr = cosine_lr(cfg.optim.lr, it, cfg.iterations, cfg.optim.floor_ratio)
            else:
                lr = cfg.optim.lr
            adam = replace(adam, lr=lr)

            idxs = data_rng.integers(0, len(ds), size=cfg.batch_size)
            acc_gw = acc_gb = None
            sums = {"l_seg": 0.0, "l_mfp": 0.0, "l_pcl": 0.0, "l_aux": 0.0, "l_total": 0.0}

            for i in idxs:
                attempts = 0
                while True:
                    item = ds[int(i)]
                    try:
                        img, feats_u, grid = prepare(item)
                        if gh is None:
                            gh, gw = feats_u.shape[:2]
                        out_u = head_forward(params, feats_u, r, r)
                        z_p, ok_p = _zeta_step(out_u.prob_fg_full, grid, cfg.solver)
                        nonconverged += 0 if ok_p else 1

                        if need_masked:
                            if cfg.backend.kind == "toy":
                                rec = sample_mask(bank, draw_counter)
                                feats_m = backend.encode(apply_mask(img, rec.mask))
                            else:
                                ids = backend.masked_ids(item.image_id)
                                feats_m = backend.encode(
                                    image_id=item.image_id,
                                    variant=MASKED,
                                    mask_id=ids[draw_counter % len(ids)],
                                )
                            draw_counter += 1
                            out_m = head_forward(params, feats_m, r, r)
                            z_pm, ok_pm = _zeta_step(out_m.prob_fg_full, grid, cfg.solver)
                            nonconverged += 0 if ok_pm else 1
                        else:
                            feats_m, out_m, z_pm = feats_u, out_u, z_p
                        break
                    except (ValueError, np.linalg.LinAlgError) as exc:
                        skipped += 1
                        attempts += 1
                        logger.warning("skipping %s after solver failure: %s", item.image_id, exc)
                        if attempts > 5:
                            raise RuntimeError(
                                f"iteration {it}: {attempts} consecutive solver failures"
                            ) from exc
                        i = data_rng.integers(0, len(ds))

                report = total_loss(out_u.prob_fg_full, out_m.prob_fg_full, z_p, z_pm, cfg.loss)
                if not np.isfinite(report.l_total):
                    raise RuntimeError(f"iteration {it}, image {item.image_id}: non-finite loss")

                g_u = resize_bilinear_adjoint(report.grad_m_p, gh, gw)
                grad_w, grad_b = head_backward(params, feats_u, g_u)
                if need_masked:
                    g_m = resize_bilinear_adjoint(report.grad_m_pm, gh, gw)
                    gw_m, gb_m = head_backward(params, feats_m, g_m)
                    grad_w = grad_w + gw_m
                    grad_b = grad_b + gb_m
                acc_gw = grad_w if acc_gw is None else acc_gw + grad_w
                acc_gb = grad_b if acc_gb is None else acc_gb + grad_b
                for k in sums:
                    sums[k] += getattr(report, k)

            params, adam = adam_step(adam, params, acc_gw / cfg.batch_size, acc_gb / cfg.batch_size)

            line = {k: sums[k] / cfg.batch_size for k in sums}
            line["iter"] = it
            line["lr"] = lr
            log_file.write(json.dumps(line, sort_keys=True) + "\n")
            if first_total is None:
                first_total = line["l_total"]
            final_total = line["l_total"]

            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, adam, it + 1, chash, out / f"checkpoint_{it + 1:06d}.json")

    save_checkpoint(params, adam, cfg.iterations, chash, ck_path)
    if backend.state_hash() != backend_hash:
        raise RuntimeError("backend state changed during training; encoders must stay frozen")
    logger.info(
        "train: %d iterations in %.1fs (loss %.4f -> %.4f, %d skipped, %d unconverged solves)",
        cfg.iterations,
        time.monotonic() - t_start,
        first_total,
        final_total,
        skipped,
        nonconverged,
    )
    return TrainSummary(
        checkpoint_path=ck_path,
        log_path=log_path,
        config_hash=chash,
        iterations=cfg.iterations,
        first_total=float(first_total),
        final_total=float(final_total),
        solver_nonconverged=nonconverged,
        images_skipped=skipped,
    )


# --- inference and evaluation ------------------------------------------------------


@dataclass
class InferenceResult:
    image_id: str
    raw_soft: np.ndarray  # (R, R) float32
    binary: np.ndarray  # raw_soft binarized at 0.5
    bs_soft: np.ndarray | None  # solver output before re-binarization
    refined: np.ndarray | None  # zeta(raw_soft)


def infer_item(
    params: DecoderParams,
    backend,
    item: DatasetItem,
    solver_cfg: SolverConfig,
    resolution: int,
    with_bs: bool = True,
) -> InferenceResult:
    """Normalization, frozen encoding and the head only; no masking, no
    augmentation at inference time."""
    img = normalize_image(item.image_raw)
    if getattr(backend, "kind", "toy") == "toy":
        feats = backend.encode(img, image_id=item.image_id)
    else:
        feats = backend.encode(image_id=item.image_id)
    out = head_forward(params, feats, resolution, resolution)
    raw_soft = out.prob_fg_full.astype(np.float32)
    hard = binarize(raw_soft, 0.5)
    bs_soft = refined = None
    if with_bs:
        grid = BilateralGrid(
            img, solver_cfg.sigma_spatial, solver_cfg.sigma_luma, solver_cfg.sigma_chroma
        )
        bs_soft, _ = solve(grid, hard, np.ones(grid.shape, dtype=np.float32), solver_cfg)
        refined = binarize(bs_soft, 0.5)
    return InferenceResult(
        image_id=item.image_id, raw_soft=raw_soft, binary=hard, bs_soft=bs_soft, refined=refined
    )


def _box_or_none(mask_binary: np.ndarray, native_shape: tuple[int, int]):
    at_native = resize_nearest(mask_binary, *native_shape)
    try:
        return mask_to_box(at_native)
    except EmptyMaskError:
        return None


def evaluate(
    params: DecoderParams,
    backend,
    manifest: Manifest,
    resolution: int,
    solver_cfg: SolverConfig = SolverConfig(),
    metric_cfg: MetricConfig = MetricConfig(),
    with_bs: bool = True,
) -> EvalReport:
    """Score raw predictions and, when enabled, solver-refined predictions.

    CorLoc boxes come from the mask named by metric_cfg.corloc_source; both
    rows share that number, per-row saliency stays independent.
    """
    ds = load_dataset(manifest, resolution)
    plain_scores, bs_scores = [], []
    plain_boxes, bs_boxes = [], []
    gt_boxes = []
    per_image = []
    for item in ds:
        res = infer_item(params, backend, item, solver_cfg, resolution, with_bs=with_bs)
        if item.gt_mask_path is None:
            raise ValueError(f"{item.image_id}: evaluation needs ground-truth masks")
        gt = (load_gray_png(item.gt_mask_path) > 127.5).astype(np.float32)
        s_plain = saliency_scores(res.raw_soft, gt, metric_cfg)
        plain_scores.append(s_plain)
        plain_boxes.append(_box_or_none(res.binary, item.native_shape))
        gt_boxes.append(item.gt_boxes or [])
        rec = {"image_id": item.image_id, "acc": s_plain.acc, "iou": s_plain.iou}
        if with_bs:
            s_bs = saliency_scores(res.bs_soft, gt, metric_cfg)
            bs_scores.append(s_bs)
            bs_boxes.append(_box_or_none(res.refined, item.native_shape))
            rec.update({"acc_bs": s_bs.acc, "iou_bs": s_bs.iou})
        per_image.append(rec)

    if metric_cfg.corloc_source == "refined" and with_bs:
        corloc_boxes = bs_boxes
    else:
        corloc_boxes = plain_boxes
    rows = [aggregate_row("plain", plain_scores, corloc_boxes, gt_boxes, metric_cfg)]
    if with_bs:
        rows.append(aggregate_row("bs", bs_scores, corloc_boxes, gt_boxes, metric_cfg))
    meta = {
        "max_f_beta_mode": metric_cfg.max_f_beta_mode,
        "corloc_source": metric_cfg.corloc_source if with_bs else "raw",
        "resolution": resolution,
    }
    dataset_id = str(manifest.meta.get("dataset_id", "dataset"))
    return EvalReport(dataset_id=dataset_id, rows=rows, per_image=per_image, metadata=meta)


# --- feature export (toy) ------------------------------------------------------------


def export_toy_features(
    manifest_path,
    out_dir,
    backend_cfg: BackendConfig = BackendConfig(),
    resolution: int = 224,
    mask_dir=None,
    mask_mode: str = "high",
    variants: int = 0,
    seed: int = 0,
) -> Path:
    """Encode a dataset with the toy backend and write PKBF files plus a
    replay manifest. Masked variants draw from a mask bank when requested."""
    manifest = load_manifest(manifest_path)
    ds = load_dataset(manifest, resolution)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    enc = ToyEncoder(backend_cfg.patch, backend_cfg.dim, backend_cfg.encoder_seed)
    bank = None
    if variants > 0:
        if not mask_dir:
            raise ValueError("masked variants need mask_dir")
        bank = build_bank(mask_dir, mask_mode, seed=seed, resolution=resolution)
    entries = []
    draw = 0
    by_id = {im.image_id: im for im in manifest.images}
    for item in ds:
        img = normalize_image(item.image_raw)
        feats = enc.encode(img, image_id=item.image_id)
        rel = f"features/{item.image_id}.pkbf"
        write_feature_file(FeatureRecord(item.image_id, UNMASKED, None, feats), out / rel)
        src = by_id[item.image_id]
        masked_variants = []
        for v in range(variants):
            rec = sample_mask(bank, draw)
            draw += 1
            mfeats = enc.encode(apply_mask(img, rec.mask))
            mask_id = f"{rec.id}#d{v}"
            mrel = f"features/{item.image_id}__m{v}.pkbf"
            write_feature_file(FeatureRecord(item.image_id, MASKED, mask_id, mfeats), out / mrel)
            masked_variants.append({"mask_id": mask_id, "feature_path": mrel})
        entries.append(
            ManifestImage(
                image_id=item.image_id,
                # absolute paths: the exported manifest lives in out_dir, so
                # source-relative paths would resolve against the wrong root
                image_path=str(manifest.resolve(src.image_path).resolve()),
                unmasked_feature_path=rel,
                masked_variants=masked_variants,
                ground_truth_mask_path=(
                    str(manifest.resolve(src.ground_truth_mask_path).resolve())
                    if src.ground_truth_mask_path
                    else None
                ),
                ground_truth_boxes=src.ground_truth_boxes,
            )
        )
    out_manifest = out / "manifest.json"
    meta = {
        "feature_source": "toy",
        "encoder": {"patch": backend_cfg.patch, "dim": backend_cfg.dim, "seed": backend_cfg.encoder_seed},
        "resolution": resolution,
    }
    save_manifest(out_manifest, entries, meta=meta)
    return out_manifest


def report_to_dict(report: EvalReport) -> dict:
    return {
        "dataset_id": report.dataset_id,
        "metadata": report.metadata,
        "rows": [dataclasses.asdict(r) for r in report.rows],
        "per_image": report.per_image,
    }
