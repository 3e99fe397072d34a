"""Minimal vision transformer matching the self-distilled ViT-S/8 layout.

Parameter names mirror the reference implementation (``cls_token``,
``pos_embed``, ``patch_embed.proj.*``, ``blocks.N.{norm1,attn.qkv,attn.proj,
norm2,mlp.fc1,mlp.fc2}.*``, ``norm.*``) so published checkpoints load with
``strict=True``.  Inference only: no dropout, no stochastic depth.

``grid_features`` returns per-patch features from the final attention block;
the ``source`` selector picks the key / query / value projections
(concatenated across heads) or the block output after the final layer norm.
"""

from __future__ import annotations

import torch
from torch import nn

from . import ExporterError

FEATURE_SOURCES = ("key", "query", "value", "block_output")


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).flatten(2).transpose(1, 2)  # (B, HW, C)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, capture: dict | None = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, heads, N, head_dim)
        if capture is not None:
            for name, t in (("query", q), ("key", k), ("value", v)):
                capture[name] = t.transpose(1, 2).reshape(b, n, c)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, capture: dict | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), capture=capture)
        return x + self.mlp(self.norm2(x))


class VisionTransformer(nn.Module):
    def __init__(
        self,
        img_size: int = 224,
        patch_size: int = 8,
        in_chans: int = 3,
        embed_dim: int = 384,
        depth: int = 12,
        num_heads: int = 6,
        mlp_ratio: float = 4.0,
    ):
        super().__init__()
        if img_size % patch_size:
            raise ValueError(f"img_size {img_size} not divisible by patch {patch_size}")
        self.patch_size = patch_size
        self.grid_side = img_size // patch_size
        self.embed_dim = embed_dim
        self.patch_embed = PatchEmbed(patch_size, in_chans, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid_side**2 + 1, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def _tokens(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        t = self.patch_embed(x)
        t = torch.cat([self.cls_token.expand(b, -1, -1), t], dim=1)
        return t + self.pos_embed

    @torch.inference_mode()
    def grid_features(self, x: torch.Tensor, source: str = "key") -> torch.Tensor:
        """Patch-token features from the final attention block, shaped
        (B, grid, grid, dim)."""
        if source not in FEATURE_SOURCES:
            raise ValueError(f"source must be one of {FEATURE_SOURCES}, got {source!r}")
        t = self._tokens(x)
        for blk in self.blocks[:-1]:
            t = blk(t)
        capture: dict = {}
        t = self.blocks[-1](t, capture=capture)
        feats = self.norm(t) if source == "block_output" else capture[source]
        patches = feats[:, 1:, :]  # drop the class token
        b, n, c = patches.shape
        g = self.grid_side
        if n != g * g:
            raise ValueError(f"expected {g * g} patch tokens, got {n}")
        return patches.reshape(b, g, g, c)


def build_vit_s8() -> VisionTransformer:
    model = VisionTransformer()
    model.eval()
    return model


def _unwrap_state_dict(obj) -> dict:
    if not isinstance(obj, dict):
        raise ExporterError(f"weights file holds {type(obj).__name__}, expected a state dict")
    for key in ("teacher", "student", "model", "state_dict"):
        if key in obj and isinstance(obj[key], dict):
            return _unwrap_state_dict(obj[key])
    return obj


def load_weights(model: VisionTransformer, path) -> None:
    """Load a checkpoint into the model, tolerating common wrappings
    (teacher/student/model/state_dict nesting, module./backbone. prefixes,
    projection-head parameters)."""
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises many concrete types
        raise ExporterError(f"cannot read weights from {path}: {exc}") from exc
    state = {}
    for key, value in _unwrap_state_dict(raw).items():
        for prefix in ("module.", "backbone."):
            if key.startswith(prefix):
                key = key[len(prefix) :]
        if key.startswith("head."):
            continue
        state[key] = value
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ExporterError(f"weights at {path} do not match ViT-S/8: {exc}") from exc
