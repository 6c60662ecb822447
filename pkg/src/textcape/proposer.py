"""Similarity heatmaps between keypoint tokens and image tokens, and their peaks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoder import RefinedFeatures


@dataclass
class SimilarityHeatmaps:
    scores: torch.Tensor  # (B, K, h, w) logits
    keypoint_mask: torch.Tensor


class SimilarityProposer(nn.Module):
    """score(i, p) = (W_s s_i + b_s) . (W_q q_p + b_q) / sqrt(C)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.support_proj = nn.Linear(dim, dim)
        self.query_proj = nn.Linear(dim, dim)

    def forward(self, refined: RefinedFeatures) -> SimilarityHeatmaps:
        s = self.support_proj(refined.support)
        q = self.query_proj(refined.query)
        scores = s @ q.transpose(1, 2) / math.sqrt(self.dim)
        b, k, _ = scores.shape
        return SimilarityHeatmaps(scores.view(b, k, refined.grid_h, refined.grid_w),
                                  refined.keypoint_mask)


def similarity(refined: RefinedFeatures, weights: SimilarityProposer) -> SimilarityHeatmaps:
    return weights(refined)


def select_peaks(heatmaps: SimilarityHeatmaps | torch.Tensor, mask: torch.Tensor | None = None):
    """Hard argmax per keypoint, as normalised cell-centre coordinates (B, K, 2) in (x, y).

    ``torch.argmax`` returns the first maximal index, which is the lowest
    row-major cell on ties. Masked keypoints get (0.5, 0.5).
    """
    scores = heatmaps.scores if isinstance(heatmaps, SimilarityHeatmaps) else heatmaps
    if mask is None and isinstance(heatmaps, SimilarityHeatmaps):
        mask = heatmaps.keypoint_mask
    h, w = scores.shape[-2:]
    with torch.no_grad():
        flat = scores.flatten(-2).argmax(dim=-1)
        rows = torch.div(flat, w, rounding_mode="floor")
        cols = flat - rows * w
        coords = torch.stack([(cols.to(scores.dtype) + 0.5) / w,
                              (rows.to(scores.dtype) + 0.5) / h], dim=-1)
        if mask is not None:
            coords = torch.where(mask.unsqueeze(-1), coords, torch.full_like(coords, 0.5))
    return coords
