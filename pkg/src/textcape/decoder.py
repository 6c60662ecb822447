"""Iterative keypoint refinement with attention and skeleton GCN mixing.

Each layer runs keypoint self-attention, a GCN step over the normalised
skeleton adjacency (graph kind only), cross-attention into the image
tokens and a feed-forward block. An offset head then moves every
coordinate in inverse-sigmoid space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import FeedForward, MultiHeadAttention
from .encoder import RefinedFeatures, sine_embed

DECODER_KINDS = ("graph", "mlp")
_EPS = 1e-6


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 3
    model_dim: int = 256
    num_heads: int = 8
    ffn_dim: int | None = None
    decoder_kind: str = "graph"
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 4 * self.model_dim


@dataclass
class LayerOutputs:
    coords_per_layer: torch.Tensor  # (L, B, K, 2)
    cross_attention: list[torch.Tensor] | None = None  # per layer (B, K, h*w)

    @property
    def final(self) -> torch.Tensor:
        return self.coords_per_layer[-1]


def inverse_sigmoid(x: torch.Tensor, eps: float = _EPS) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x) - torch.log1p(-x)


def gcn_layer(X: torch.Tensor, A_norm, W: torch.Tensor | nn.Linear,
              activation: Callable[[torch.Tensor], torch.Tensor] | None = None) -> torch.Tensor:
    """X + activation(A_norm @ X @ W)."""
    a = getattr(A_norm, "matrix", A_norm)
    a = torch.as_tensor(np.array(a) if isinstance(a, np.ndarray) else a, dtype=X.dtype,
                        device=X.device)
    mixed = a @ X
    mixed = W(mixed) if isinstance(W, nn.Module) else mixed @ W
    if activation is not None:
        mixed = activation(mixed)
    return X + mixed


class DecoderLayer(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        c = config.model_dim
        self.use_graph = config.decoder_kind == "graph"
        self.norm1 = nn.LayerNorm(c)
        self.self_attn = MultiHeadAttention(c, config.num_heads)
        if self.use_graph:
            self.norm_gcn = nn.LayerNorm(c)
            self.gcn_weight = nn.Linear(c, c, bias=False)
        self.norm2 = nn.LayerNorm(c)
        self.cross_attn = MultiHeadAttention(c, config.num_heads)
        self.norm3 = nn.LayerNorm(c)
        self.ffn = FeedForward(c, config.hidden_dim, config.dropout)
        self.norm_out = nn.LayerNorm(c)
        self.offset_head = nn.Linear(c, 2)
        nn.init.zeros_(self.offset_head.weight)
        nn.init.zeros_(self.offset_head.bias)

    def forward(self, x, query_pos, memory, memory_pos, adjacency, key_mask, trace=False):
        h = self.norm1(x)
        attn_out, _ = self.self_attn(h + query_pos, h + query_pos, h, key_mask)
        x = x + attn_out
        if self.use_graph:
            x = x + F.gelu(adjacency @ self.gcn_weight(self.norm_gcn(x)))
        h = self.norm2(x)
        cross_out, cross_w = self.cross_attn(h + query_pos, memory + memory_pos, memory,
                                             need_weights=trace)
        x = x + cross_out
        x = x + self.ffn(self.norm3(x))
        return x, self.offset_head(self.norm_out(x)), cross_w


class GraphDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        c = config.model_dim
        self.coord_embed = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, c))
        self.layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.num_layers))

    def _query_pos(self, coords, grid_h, grid_w):
        # coordinates expressed in the same cell units as the image encoding
        rows = coords[..., 1] * grid_h - 0.5
        cols = coords[..., 0] * grid_w - 0.5
        return self.coord_embed(sine_embed(rows, cols, self.config.model_dim))

    def forward(self, proposals: torch.Tensor, refined: RefinedFeatures, adjacency: torch.Tensor,
                trace: bool = False) -> LayerOutputs:
        mask = refined.keypoint_mask
        b, k, c = refined.support.shape
        if c != self.config.model_dim:
            raise ValueError(f"feature width {c} does not match decoder model_dim {self.config.model_dim}")
        adjacency = torch.as_tensor(np.array(adjacency) if isinstance(adjacency, np.ndarray)
                                    else adjacency, dtype=refined.support.dtype)
        if adjacency.shape[-2:] != (k, k):
            raise ValueError(f"adjacency is {tuple(adjacency.shape[-2:])} but K={k}")
        if adjacency.dim() == 2:
            adjacency = adjacency.expand(b, k, k)

        keep = mask.unsqueeze(-1)
        center = torch.full_like(proposals, 0.5)
        coords = torch.where(keep, proposals, center)
        memory_pos = refined.query_pos.to(refined.query.dtype).unsqueeze(0)
        x = refined.support
        outputs, maps = [], []
        for layer in self.layers:
            qpos = self._query_pos(coords, refined.grid_h, refined.grid_w)
            x, delta, cross_w = layer(x, qpos, refined.query, memory_pos, adjacency, mask, trace)
            x = x * keep.to(x.dtype)
            coords = torch.where(keep, torch.sigmoid(inverse_sigmoid(coords) + delta), center)
            outputs.append(coords)
            if trace:
                uniform = torch.full_like(cross_w, 1.0 / cross_w.shape[-1])
                maps.append(torch.where(keep, cross_w, uniform).detach())
        return LayerOutputs(torch.stack(outputs), maps if trace else None)


def decode(proposals, refined: RefinedFeatures, adjacency, mask, config: DecoderConfig,
           weights: GraphDecoder, trace: bool = False) -> LayerOutputs:
    if weights.config != config:
        raise ValueError("decoder weights were built for a different config")
    if mask is not None and not torch.equal(mask, refined.keypoint_mask):
        refined = RefinedFeatures(refined.support, refined.query, mask, refined.grid_h,
                                  refined.grid_w, refined.query_pos)
    return weights(proposals, refined, adjacency, trace=trace)


class TracingDisabledError(RuntimeError):
    pass


def attention_maps(outputs: LayerOutputs) -> torch.Tensor:
    """Head-averaged cross-attention per layer, shape (L, B, K, h*w)."""
    if outputs.cross_attention is None:
        raise TracingDisabledError("decode was run without trace=True")
    return torch.stack(outputs.cross_attention)
