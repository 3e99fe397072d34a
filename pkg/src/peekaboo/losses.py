"""Self-training losses over predicted soft masks.

Total objective: alpha * L_seg(M_p, z_p) + L_mfp(M_pm, z_pm) + L_pcl + aux_weight * L_aux,
where z_* are detached refined targets, L_seg / L_mfp are pixel-mean binary
cross-entropies, L_pcl couples the two branches, and L_aux is cross-entropy
of the raw unmasked prediction against its own 0.5-binarization.

All math runs in float64 internally; gradients are returned w.r.t. the two
prediction grids, never w.r.t. any target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import ShapeError, binarize

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.5
    aux_weight: float = 4.0
    pcl_mode: str = "soft"  # "soft" couples soft masks by MSE; "literal" logs the refined-mask MSE, no gradient
    enable_mfp: bool = True
    enable_pcl: bool = True

    def __post_init__(self):
        if self.pcl_mode not in ("soft", "literal"):
            raise ValueError(f"pcl_mode must be 'soft' or 'literal', got {self.pcl_mode!r}")


@dataclass(frozen=True)
class LossReport:
    l_seg: float
    l_mfp: float
    l_pcl: float
    l_pcl_literal: float
    l_aux: float
    l_total: float
    grad_m_p: np.ndarray
    grad_m_pm: np.ndarray


def _as64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def bce(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-mean binary cross-entropy with predictions clamped to
    [eps, 1 - eps]; returns (value, gradient w.r.t. pred)."""
    p = _as64(pred)
    t = _as64(target)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs target {t.shape}")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    value = float(-np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)))
    grad = (pc - t) / (pc * (1.0 - pc)) / p.size
    return value, grad


def loss_seg(m_p: np.ndarray, zeta_p: np.ndarray) -> tuple[float, np.ndarray]:
    """Unmasked branch vs its own refined, detached target."""
    return bce(m_p, zeta_p)


def loss_mfp(m_pm: np.ndarray, zeta_pm: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked-branch predictor vs the refined target of its own output."""
    return bce(m_pm, zeta_pm)


def loss_pcl(
    m_p: np.ndarray,
    m_pm: np.ndarray,
    zeta_p: np.ndarray,
    zeta_pm: np.ndarray,
    mode: str = "soft",
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Predictor consistency between branches.

    Returns (active value, literal value, grad w.r.t. m_p, grad w.r.t. m_pm).
    soft mode: mean (m_p - m_pm)^2 with symmetric gradients. literal mode:
    mean squared difference of the two refined masks; both are detached, so
    the gradient is exactly zero and the value is logged only.
    """
    a = _as64(m_p)
    b = _as64(m_pm)
    if a.shape != b.shape:
        raise ShapeError(f"m_p {a.shape} vs m_pm {b.shape}")
    literal = float(np.mean((_as64(zeta_p) - _as64(zeta_pm)) ** 2))
    if mode == "literal":
        return literal, literal, np.zeros_like(a), np.zeros_like(b)
    d = a - b
    value = float(np.mean(d * d))
    g = 2.0 * d / a.size
    return value, literal, g, -g


def loss_aux(m_raw: np.ndarray) -> tuple[float, np.ndarray]:
    """Binarization pressure: cross-entropy of the raw prediction against its
    own 0.5-binarization, target detached."""
    target = binarize(m_raw, 0.5)
    return bce(m_raw, target)


def total_loss(
    m_p: np.ndarray,
    m_pm: np.ndarray,
    zeta_p: np.ndarray,
    zeta_pm: np.ndarray,
    cfg: LossConfig = LossConfig(),
) -> LossReport:
    """Weighted sum of the enabled terms; disabled terms contribute exactly 0
    to both the value and the gradients."""
    a = _as64(m_p)
    b = _as64(m_pm)
    if a.shape != b.shape or a.shape != np.asarray(zeta_p).shape:
        raise ShapeError("all grids must share one resolution")
    grad_p = np.zeros_like(a)
    grad_pm = np.zeros_like(b)

    l_seg_v, g_seg = loss_seg(a, zeta_p)
    grad_p += cfg.alpha * g_seg

    if cfg.enable_mfp:
        l_mfp_v, g_mfp = loss_mfp(b, zeta_pm)
        grad_pm += g_mfp
    else:
        l_mfp_v = 0.0

    if cfg.enable_pcl:
        l_pcl_v, l_pcl_lit, g_pcl_p, g_pcl_pm = loss_pcl(a, b, zeta_p, zeta_pm, cfg.pcl_mode)
        grad_p += g_pcl_p
        grad_pm += g_pcl_pm
    else:
        l_pcl_v = 0.0
        l_pcl_lit = float(np.mean((_as64(zeta_p) - _as64(zeta_pm)) ** 2))

    if cfg.aux_weight != 0.0:
        l_aux_v, g_aux = loss_aux(a)
        grad_p += cfg.aux_weight * g_aux
    else:
        l_aux_v = 0.0

    total = cfg.alpha * l_seg_v + l_mfp_v + l_pcl_v + cfg.aux_weight * l_aux_v
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite loss: seg={l_seg_v} mfp={l_mfp_v} pcl={l_pcl_v} aux={l_aux_v}"
        )
    return LossReport(
        l_seg=l_seg_v,
        l_mfp=l_mfp_v,
        l_pcl=l_pcl_v,
        l_pcl_literal=l_pcl_lit,
        l_aux=l_aux_v,
        l_total=float(total),
        grad_m_p=grad_p,
        grad_m_pm=grad_pm,
    )
