"""Localization and saliency metrics.

Boxes use inclusive pixel coordinates; box areas count pixels. CorLoc is the
percentage of images whose predicted box overlaps some ground-truth box with
IoU strictly greater than the threshold (an IoU of exactly 0.5 is a miss).
F_beta uses beta^2 = 0.3 and is swept over 255 uniform thresholds; the
dataset-level max F_beta is the max over thresholds of the per-threshold
dataset mean (max-of-means).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grids import BoundingBox, check_binary_mask, check_mask, resize_bilinear

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class EmptyMaskError(ValueError):
    """Mask has no foreground pixels, so no box exists."""


@dataclass(frozen=True)
class MetricConfig:
    corloc_iou_threshold: float = 0.5
    beta_squared: float = 0.3
    n_thresholds: int = 255  # tau_i = i / (n + 1), i = 1..n
    max_f_beta_mode: str = "max_of_means"
    corloc_source: str = "refined"  # boxes from the refined mask, or "raw"

    def thresholds(self) -> np.ndarray:
        n = self.n_thresholds
        return np.arange(1, n + 1) / (n + 1)


@dataclass(frozen=True)
class SaliencyScores:
    acc: float
    iou: float
    f_beta: np.ndarray  # per-threshold values
    valid_iou: bool  # False when ground truth has no foreground


def mask_to_box(mask: np.ndarray) -> BoundingBox:
    """Tight box of the largest 8-connected foreground component.

    Size ties break toward the component whose first pixel appears earliest
    in row-major scan order.
    """
    m = check_binary_mask(mask)
    if not np.any(m):
        raise EmptyMaskError("mask has no foreground pixels")
    labels, count = ndimage.label(m, structure=EIGHT_CONNECTED)
    # labels are assigned in raster order of first encounter, and argmax
    # returns the first maximum, which realizes the scan-order tie-break
    sizes = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == largest)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with inclusive pixel extents."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def corloc(
    predictions: list[BoundingBox | None],
    ground_truths: list[list[BoundingBox]],
    cfg: MetricConfig = MetricConfig(),
) -> tuple[float, int, int]:
    """Percentage of images where the predicted box matches one of the GT
    boxes with IoU strictly above threshold.

    Images without GT boxes are excluded (with a warning); an absent
    prediction counts as a miss. Returns (corloc %, n scored, n excluded).
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must align")
    hits = 0
    scored = 0
    excluded = 0
    for pred, gts in zip(predictions, ground_truths):
        if not gts:
            excluded += 1
            continue
        scored += 1
        if pred is None:
            continue
        best = max(box_iou(pred, gt) for gt in gts)
        if best > cfg.corloc_iou_threshold:
            hits += 1
    if excluded:
        logger.warning("corloc: %d image(s) without ground-truth boxes excluded", excluded)
    pct = 100.0 * hits / scored if scored else 0.0
    return pct, scored, excluded


def saliency_scores(
    pred: np.ndarray, gt: np.ndarray, cfg: MetricConfig = MetricConfig()
) -> SaliencyScores:
    """Pixel accuracy and IoU at a 0.5 binarization, plus per-threshold F_beta.

    The prediction is bilinearly resized to the ground-truth resolution when
    shapes differ. IoU is undefined (valid_iou False) for all-background GT.
    """
    p = check_mask(np.asarray(pred, dtype=np.float64))
    g = check_binary_mask(gt).astype(bool)
    if p.shape != g.shape:
        p = resize_bilinear(p, *g.shape)
    pb = p > 0.5
    tp = int(np.sum(pb & g))
    fp = int(np.sum(pb & ~g))
    fn = int(np.sum(~pb & g))
    tn = int(np.sum(~pb & ~g))
    acc = (tp + tn) / g.size
    denom = tp + fp + fn
    valid_iou = bool(g.any())
    iou = tp / denom if denom > 0 else 0.0

    b2 = cfg.beta_squared
    n_gt = int(g.sum())
    f_vals = np.zeros(cfg.n_thresholds)
    for i, tau in enumerate(cfg.thresholds()):
        pb_t = p > tau
        tp_t = int(np.sum(pb_t & g))
        fp_t = int(np.sum(pb_t & ~g))
        prec = tp_t / (tp_t + fp_t) if tp_t + fp_t > 0 else 0.0
        rec = tp_t / n_gt if n_gt > 0 else 0.0
        num = (1 + b2) * prec * rec
        den = b2 * prec + rec
        f_vals[i] = num / den if den > 0 else 0.0
    return SaliencyScores(acc=acc, iou=iou, f_beta=f_vals, valid_iou=valid_iou)


@dataclass
class EvalRow:
    label: str  # "plain" or "bs"
    mean_acc: float
    mean_iou: float
    max_f_beta: float
    corloc: float
    n_images: int
    n_iou_excluded: int
    n_corloc_excluded: int


@dataclass
class EvalReport:
    dataset_id: str
    rows: list[EvalRow]
    per_image: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def aggregate_row(
    label: str,
    scores: list[SaliencyScores],
    boxes: list[BoundingBox | None],
    gt_boxes: list[list[BoundingBox]],
    cfg: MetricConfig = MetricConfig(),
) -> EvalRow:
    """Dataset means; images with undefined IoU are excluded from the IoU and
    F_beta means but still count for accuracy."""
    if not scores:
        raise ValueError("nothing to aggregate")
    accs = [s.acc for s in scores]
    valid = [s for s in scores if s.valid_iou]
    ious = [s.iou for s in valid]
    if valid:
        mean_f_per_tau = np.mean(np.stack([s.f_beta for s in valid]), axis=0)
        max_f = float(np.max(mean_f_per_tau))
    else:
        max_f = 0.0
    pct, scored, excluded = corloc(boxes, gt_boxes, cfg)
    return EvalRow(
        label=label,
        mean_acc=float(np.mean(accs)),
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        max_f_beta=max_f,
        corloc=pct,
        n_images=len(scores),
        n_iou_excluded=len(scores) - len(valid),
        n_corloc_excluded=excluded,
    )


def format_report_table(report: EvalReport) -> str:
    header = f"dataset: {report.dataset_id}  (n={report.rows[0].n_images})"
    lines = [header, f"{'row':<8}{'corloc':>9}{'acc':>9}{'iou':>9}{'maxF':>9}"]
    for row in report.rows:
        lines.append(
            f"{row.label:<8}{row.corloc:>9.2f}{row.mean_acc * 100:>9.2f}"
            f"{row.mean_iou * 100:>9.2f}{row.max_f_beta * 100:>9.2f}"
        )
    return "\n".join(lines)
