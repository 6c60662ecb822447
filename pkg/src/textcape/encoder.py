"""Joint refinement of support text tokens and query image tokens.

Both token sets are concatenated into one sequence, passed through
pre-norm self-attention blocks, and split back. Padded keypoint tokens
are never attended to and are re-zeroed after every block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import FeedForward, MultiHeadAttention
from .embedders import ProjectedFeatures


@dataclass(frozen=True)
class EncoderConfig:
    num_blocks: int = 3
    model_dim: int = 256
    num_heads: int = 8
    ffn_dim: int | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 4 * self.model_dim


@dataclass
class RefinedFeatures:
    support: torch.Tensor  # (B, K, C)
    query: torch.Tensor  # (B, h*w, C)
    keypoint_mask: torch.Tensor
    grid_h: int
    grid_w: int
    query_pos: torch.Tensor  # (h*w, C) positional encoding used for the query tokens


def sine_embed(rows: torch.Tensor, cols: torch.Tensor, dim: int, temperature: float = 10000.0):
    """Sinusoidal embedding of continuous (row, col) positions in cell units.

    Output channels: [sin(row*f), cos(row*f), sin(col*f), cos(col*f)] with
    dim/4 frequencies f_k = temperature^(-k / (dim/4)).
    """
    if dim % 4:
        raise ValueError(f"positional encoding dim {dim} must be divisible by 4")
    quarter = dim // 4
    freqs = temperature ** (-torch.arange(quarter, dtype=rows.dtype, device=rows.device) / quarter)
    r = rows.unsqueeze(-1) * freqs
    c = cols.unsqueeze(-1) * freqs
    return torch.cat([r.sin(), r.cos(), c.sin(), c.cos()], dim=-1)


def positional_encoding(grid_h: int, grid_w: int, C: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D encoding of a row-major token grid, shape (h*w, C)."""
    if C % 4:
        raise ValueError(f"positional encoding dim {C} must be divisible by 4")
    rr, cc = torch.meshgrid(torch.arange(grid_h, dtype=dtype), torch.arange(grid_w, dtype=dtype),
                            indexing="ij")
    return sine_embed(rr.reshape(-1), cc.reshape(-1), C)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, hidden: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pos, key_mask):
        h = self.norm1(x)
        qk = h + pos
        attn_out, _ = self.attn(qk, qk, h, key_mask)
        x = x + self.drop(attn_out)
        return x + self.drop(self.ffn(self.norm2(x)))


class FusionEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.model_dim
        # support tokens have no image position; they share one learned type embedding
        self.keypoint_type = nn.Parameter(torch.randn(c) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(c, config.num_heads, config.hidden_dim, config.dropout)
            for _ in range(config.num_blocks))

    def forward(self, features: ProjectedFeatures) -> RefinedFeatures:
        support, query, mask = features.support, features.query, features.keypoint_mask
        if support.shape[-1] != self.config.model_dim or query.shape[-1] != self.config.model_dim:
            raise ValueError(
                f"feature width {support.shape[-1]}/{query.shape[-1]} does not match "
                f"encoder model_dim {self.config.model_dim}")
        b, k, c = support.shape
        hw = query.shape[1]
        qpos = positional_encoding(features.grid_h, features.grid_w, c, dtype=query.dtype)
        pos = torch.cat([self.keypoint_type.to(query.dtype).expand(k, c), qpos], dim=0)
        key_mask = torch.cat([mask, torch.ones(b, hw, dtype=torch.bool, device=mask.device)], dim=1)
        keep = key_mask.unsqueeze(-1).to(query.dtype)

        x = torch.cat([support, query], dim=1) * keep
        for block in self.blocks:
            x = block(x, pos, key_mask) * keep
        return RefinedFeatures(x[:, :k], x[:, k:], mask, features.grid_h, features.grid_w, qpos)


def refine(features: ProjectedFeatures, config: EncoderConfig, weights: FusionEncoder | None = None):
    encoder = weights if weights is not None else FusionEncoder(config)
    if encoder.config != config:
        raise ValueError("encoder weights were built for a different config")
    return encoder(features)
