"""Trainable maps from visual features into the language-token space."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import SpatialFeatures, TemporalFeatures
from .exceptions import ConfigError, ShapeError

SPATIAL = "spatial"
TEMPORAL = "temporal"
TEXT = "text"

TEMPORAL_TOKEN_TIERS = (4, 16, 64, 256)


@dataclass
class TokenBlock:
    """``tokens`` is an ``(L, d_model)`` tensor tagged with its modality."""

    tokens: torch.Tensor
    modality: str
    token_ids: list[int] | None = field(default=None)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


def init_weights(module: nn.Module) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def apply_rotary(x: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotary position embedding over ``(..., L, D)``; channel pairs ``(i, i + D/2)`` are rotated."""
    length, dim = x.shape[-2], x.shape[-1]
    if dim % 2:
        raise ConfigError(f"rotary embedding needs an even head width, got {dim}")
    half = dim // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = torch.arange(length, dtype=torch.float64)[:, None] * inv_freq
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    a, b = x[..., :half], x[..., half:]
    return torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)


class TransformerBlock(nn.Module):
    """Pre-norm multi-head self-attention followed by a GELU feed-forward.

    With ``rotary=True`` queries and keys are rotated by their position, so
    attention scores depend only on relative offsets.
    """

    def __init__(self, width: int, n_heads: int = 4, ff_mult: int = 4, causal: bool = False, rotary: bool = False):
        super().__init__()
        if width % n_heads:
            raise ConfigError(f"width {width} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.causal = causal
        self.rotary = rotary
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.norm1(x)).split(w, dim=-1)
        q, k, v = (t.view(b, n, self.n_heads, w // self.n_heads).transpose(1, 2) for t in (q, k, v))
        if self.rotary:
            q, k = apply_rotary(q), apply_rotary(k)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        x = x + self.proj(att.transpose(1, 2).reshape(b, n, w))
        return x + self.ff(self.norm2(x))


class SpatialProjector(nn.Module):
    """Single ViT block over each frame's patches, then an affine map to ``d_model``.

    ``variant="mlp"`` drops the ViT block (the ablation baseline).
    """

    def __init__(self, in_width: int, d_model: int, variant: str = "vit", n_heads: int = 4):
        super().__init__()
        if variant not in ("vit", "mlp"):
            raise ConfigError(f"unknown spatial projector variant {variant!r}")
        self.in_width = in_width
        self.d_model = d_model
        self.variant = variant
        self.block = TransformerBlock(in_width, n_heads) if variant == "vit" else None
        self.out = nn.Linear(in_width, d_model)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(F, N_p, C_sp)`` -> ``(F, N_p, d_model)``."""
        if self.block is not None:
            x = self.block(x)
        return self.out(x)


class TemporalProjector(nn.Module):
    """Affine map of each chunk feature to ``n_tokens`` language tokens."""

    def __init__(self, in_width: int, d_model: int, n_tokens: int = 64):
        super().__init__()
        if n_tokens < 1:
            raise ConfigError("n_tokens must be >= 1")
        self.in_width = in_width
        self.d_model = d_model
        self.n_tokens = n_tokens
        self.fc = nn.Linear(in_width, n_tokens * d_model)
        init_weights(self)

    def per_chunk(self, x: torch.Tensor) -> torch.Tensor:
        """``(K, 1, C_tp)`` -> ``(K, n_tokens, d_model)``."""
        return self.fc(x.reshape(x.shape[0], -1)).view(x.shape[0], self.n_tokens, self.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(K, 1, C_tp)`` -> ``(n_tokens, d_model)``: per-chunk tokens averaged over chunks."""
        return self.per_chunk(x).mean(dim=0)


def _param_tensor(data: np.ndarray, module: nn.Module) -> torch.Tensor:
    ref = next(module.parameters())
    return torch.as_tensor(np.asarray(data), dtype=ref.dtype, device=ref.device)


def project_spatial(features: SpatialFeatures, proj: SpatialProjector) -> TokenBlock:
    data = np.asarray(features.data)
    if data.ndim != 3 or data.shape[2] != proj.in_width:
        raise ShapeError(f"spatial features {data.shape} do not match projector input width {proj.in_width}")
    tokens = proj(_param_tensor(data, proj))
    return TokenBlock(tokens.reshape(-1, proj.d_model), SPATIAL)


def project_temporal(features: TemporalFeatures, proj: TemporalProjector) -> TokenBlock:
    data = np.asarray(features.data)
    if data.ndim != 3 or data.shape[1] != 1 or data.shape[2] != proj.in_width:
        raise ShapeError(f"temporal features {data.shape} do not match projector input width {proj.in_width}")
    return TokenBlock(proj(_param_tensor(data, proj)), TEMPORAL)
