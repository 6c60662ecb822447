"""Training losses, Gaussian target heatmaps and the PCK metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ObjectiveError(ValueError):
    pass


@dataclass
class LossBreakdown:
    heatmap: torch.Tensor
    offset: torch.Tensor
    total: torch.Tensor
    lambda_heatmap: float


def gt_heatmap(keypoints: torch.Tensor, visible: torch.Tensor, grid_h: int, grid_w: int,
               sigma: float = 1.0) -> torch.Tensor:
    """Gaussian targets in cell units, shape (..., K, grid_h, grid_w).

    ``keypoints`` holds normalised (x, y); a keypoint at x = (col + 0.5)/grid_w
    sits exactly on the centre of column ``col``.
    """
    if sigma <= 0:
        raise ObjectiveError(f"heatmap sigma must be positive, got {sigma}")
    cx = keypoints[..., 0] * grid_w - 0.5
    cy = keypoints[..., 1] * grid_h - 0.5
    rows = torch.arange(grid_h, dtype=keypoints.dtype).view(grid_h, 1)
    cols = torch.arange(grid_w, dtype=keypoints.dtype).view(1, grid_w)
    d2 = (rows - cy[..., None, None]) ** 2 + (cols - cx[..., None, None]) ** 2
    maps = torch.exp(-d2 / (2 * sigma ** 2))
    return maps * visible[..., None, None].to(maps.dtype)


def heatmap_loss(M: torch.Tensor, H: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between sigmoid(M) and H over unmasked keypoints and all cells."""
    n = int(mask.sum())
    if n == 0:
        raise ObjectiveError("heatmap loss needs at least one unmasked keypoint")
    cells = M.shape[-1] * M.shape[-2]
    err = (torch.sigmoid(M) - H).abs().sum(dim=(-1, -2))
    return torch.where(mask, err, torch.zeros_like(err)).sum() / (n * cells)


def offset_loss(coords_per_layer: torch.Tensor, gt_coords: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
    """L1 coordinate error summed over unmasked keypoints, averaged over layers.

    ``coords_per_layer`` is (L, [B,] K, 2). With a batch dimension the
    per-sample sums are averaged over the batch.
    """
    err = (coords_per_layer - gt_coords.unsqueeze(0)).abs().sum(dim=-1)
    err = torch.where(mask.unsqueeze(0), err, torch.zeros_like(err))
    per_layer = err.sum(dim=-1)
    if per_layer.dim() > 1:
        per_layer = per_layer.mean(dim=-1)
    return per_layer.mean()


def total_loss(heatmap, offset, lambda_heatmap: float = 1.0):
    if lambda_heatmap < 0:
        raise ObjectiveError("lambda_heatmap must be non-negative")
    return lambda_heatmap * heatmap + offset


def compute_losses(heatmaps: torch.Tensor, coords_per_layer: torch.Tensor, gt_coords: torch.Tensor,
                   loss_mask: torch.Tensor, sigma: float = 1.0,
                   lambda_heatmap: float = 1.0) -> LossBreakdown:
    h, w = heatmaps.shape[-2:]
    target = gt_heatmap(gt_coords, loss_mask, h, w, sigma)
    lh = heatmap_loss(heatmaps, target, loss_mask)
    lo = offset_loss(coords_per_layer, gt_coords, loss_mask)
    return LossBreakdown(lh, lo, total_loss(lh, lo, lambda_heatmap), lambda_heatmap)


def pck(pred, gt, bbox, threshold: float = 0.2, mask=None) -> float:
    """Fraction of unmasked keypoints within threshold * max(bbox_w, bbox_h) pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if threshold <= 0:
        raise ObjectiveError("PCK threshold must be positive")
    bw, bh = float(bbox[0]), float(bbox[1])
    if bw <= 0 and bh <= 0:
        raise ObjectiveError(f"degenerate bounding box {bbox}")
    mask = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ObjectiveError("PCK needs at least one unmasked keypoint")
    dist = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(dist[mask] <= threshold * max(bw, bh)))
