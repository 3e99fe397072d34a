"""Trainable two-way linear head over frozen patch features.

A 1x1 convolution in disguise: per patch, logits(k) = sum_d F(d) W(d, k) + b(k),
softmax over the two channels with channel 1 as foreground, then bilinear
upsampling of the foreground probability to pixel resolution. The encoder is
frozen, so the analytic backward pass only covers W and b.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .grids import ShapeError, resize_bilinear

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecoderParams:
    weights: np.ndarray  # (D, 2) float64
    biases: np.ndarray  # (2,) float64

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.biases)
        if w.ndim != 2 or w.shape[1] != 2 or b.shape != (2,):
            raise ShapeError(f"bad param shapes {w.shape}, {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("parameters contain non-finite values")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def count(self) -> int:
        return self.weights.size + self.biases.size


def init_params(dim: int, seed: int) -> DecoderParams:
    """Weights ~ N(0, 1/sqrt(D)), biases zero."""
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, 2))
    return DecoderParams(weights=w, biases=np.zeros(2))


@dataclass
class AdamState:
    step: int
    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(dim: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        m_w=np.zeros((dim, 2)),
        v_w=np.zeros((dim, 2)),
        m_b=np.zeros(2),
        v_b=np.zeros(2),
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


@dataclass(frozen=True)
class HeadOutput:
    logits: np.ndarray  # (gh, gw, 2) float64
    prob_fg_patch: np.ndarray  # (gh, gw) float64
    prob_fg_full: np.ndarray  # (out_h, out_w) float64


def head_forward(params: DecoderParams, features: np.ndarray, out_h: int, out_w: int) -> HeadOutput:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"features must be (gh, gw, D), got {f.shape}")
    if f.shape[2] != params.dim:
        raise ShapeError(f"feature dim {f.shape[2]} vs params dim {params.dim}")
    logits = f @ params.weights + params.biases
    # two-way softmax via the stable sigmoid of the logit difference
    prob = expit(logits[..., 1] - logits[..., 0])
    full = resize_bilinear(prob, out_h, out_w)
    return HeadOutput(logits=logits, prob_fg_patch=prob, prob_fg_full=full)


def head_backward(
    params: DecoderParams, features: np.ndarray, grad_prob_patch: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. (weights, biases), given the loss
    gradient w.r.t. the patch-level foreground probability."""
    f = np.asarray(features, dtype=np.float64)
    g = np.asarray(grad_prob_patch, dtype=np.float64)
    if f.shape[:2] != g.shape:
        raise ShapeError(f"features {f.shape[:2]} vs upstream grad {g.shape}")
    if not np.all(np.isfinite(g)):
        i, j = np.argwhere(~np.isfinite(g))[0]
        raise ValueError(f"non-finite upstream gradient at patch ({i}, {j})")
    logits = f @ params.weights + params.biases
    prob = expit(logits[..., 1] - logits[..., 0])
    dz = g * prob * (1.0 - prob)  # dL/d(l1 - l0)
    dlogits = np.stack([-dz, dz], axis=-1)
    grad_w = np.einsum("ijd,ijk->dk", f, dlogits)
    grad_b = dlogits.sum(axis=(0, 1))
    return grad_w, grad_b


def adam_step(
    state: AdamState, params: DecoderParams, grad_w: np.ndarray, grad_b: np.ndarray
) -> tuple[DecoderParams, AdamState]:
    gw = np.asarray(grad_w, dtype=np.float64)
    gb = np.asarray(grad_b, dtype=np.float64)
    if gw.shape != params.weights.shape or gb.shape != params.biases.shape:
        raise ShapeError("gradient shapes do not match parameters")
    t = state.step + 1
    m_w = state.beta1 * state.m_w + (1 - state.beta1) * gw
    v_w = state.beta2 * state.v_w + (1 - state.beta2) * gw * gw
    m_b = state.beta1 * state.m_b + (1 - state.beta1) * gb
    v_b = state.beta2 * state.v_b + (1 - state.beta2) * gb * gb
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    new_w = params.weights - state.lr * (m_w / c1) / (np.sqrt(v_w / c2) + state.eps)
    new_b = params.biases - state.lr * (m_b / c1) / (np.sqrt(v_b / c2) + state.eps)
    new_params = DecoderParams(weights=new_w, biases=new_b)
    new_state = replace(state, step=t, m_w=m_w, v_w=v_w, m_b=m_b, v_b=v_b)
    return new_params, new_state


def cosine_lr(base_lr: float, iteration: int, total: int, floor_ratio: float = 0.1) -> float:
    """Cosine decay from base_lr down to floor_ratio * base_lr."""
    if total <= 1:
        return base_lr
    t = min(max(iteration, 0), total - 1) / (total - 1)
    return base_lr * (floor_ratio + (1 - floor_ratio) * 0.5 * (1 + np.cos(np.pi * t)))


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(
    params: DecoderParams, state: AdamState, iteration: int, config_hash: str, path
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "feature_dim": params.dim,
        "weights": params.weights.tolist(),
        "biases": params.biases.tolist(),
        "adam": {
            "step": state.step,
            "m": {"weights": state.m_w.tolist(), "biases": state.m_b.tolist()},
            "v": {"weights": state.v_w.tolist(), "biases": state.v_b.tolist()},
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        },
        "iteration": iteration,
        "config_hash": config_hash,
    }
    Path(path).write_text(_canonical_json(doc))


def load_checkpoint(
    path, expected_dim: int | None = None, expected_config_hash: str | None = None
) -> tuple[DecoderParams, AdamState, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {doc.get('format_version')}")
    params = DecoderParams(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        biases=np.asarray(doc["biases"], dtype=np.float64),
    )
    if doc["feature_dim"] != params.dim:
        raise CheckpointError(
            f"{path}: feature_dim field {doc['feature_dim']} vs weights dim {params.dim}"
        )
    if expected_dim is not None and params.dim != expected_dim:
        raise CheckpointError(f"{path}: feature dim {params.dim}, expected {expected_dim}")
    a = doc["adam"]
    state = AdamState(
        step=int(a["step"]),
        m_w=np.asarray(a["m"]["weights"], dtype=np.float64),
        v_w=np.asarray(a["v"]["weights"], dtype=np.float64),
        m_b=np.asarray(a["m"]["biases"], dtype=np.float64),
        v_b=np.asarray(a["v"]["biases"], dtype=np.float64),
        lr=float(a["lr"]),
        beta1=float(a["beta1"]),
        beta2=float(a["beta2"]),
        eps=float(a["eps"]),
    )
    meta = {
        "iteration": int(doc["iteration"]),
        "config_hash": doc["config_hash"],
        "config_hash_mismatch": False,
    }
    if expected_config_hash is not None and doc["config_hash"] != expected_config_hash:
        meta["config_hash_mismatch"] = True
        logger.warning(
            "%s: config hash %s does not match expected %s",
            path,
            doc["config_hash"],
            expected_config_hash,
        )
    return params, state, meta


def config_hash_of(doc: dict) -> str:
    return hashlib.sha256(_canonical_json(doc).encode()).hexdigest()
