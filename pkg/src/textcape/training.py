"""Mini-batch training, checkpoints and the per-epoch metrics log."""
from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datasets import PoseDataset, load_dataset
from .evaluation import evaluate_model, stack_images
from .model import GraphPrompt, TextGraphPoseModel
from .objectives import compute_losses

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainResult:
    model: TextGraphPoseModel
    config: RunConfig
    metrics: list[dict]
    checkpoint: dict = field(repr=False)


def parameter_checksum(params) -> str:
    """Order-sensitive digest over the raw bytes of every tensor."""
    import hashlib
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(config: RunConfig) -> TextGraphPoseModel:
    torch.manual_seed(config.seed)
    return TextGraphPoseModel(config.model)


def make_checkpoint(model, config: RunConfig, epoch: int, optimizer=None, scheduler=None) -> dict:
    return {
        "format": "textcape-checkpoint/1",
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "config": config.to_dict(),
        "epoch": epoch,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "scheduler_state": scheduler.state_dict() if scheduler is not None else None,
        "rng_state": torch.get_rng_state(),
    }


def save_checkpoint(checkpoint: dict, path: str | Path) -> None:
    torch.save(checkpoint, Path(path))


def load_checkpoint(path_or_dict) -> tuple[TextGraphPoseModel, RunConfig, dict]:
    ckpt = path_or_dict if isinstance(path_or_dict, dict) else torch.load(
        Path(path_or_dict), map_location="cpu", weights_only=True)
    config = RunConfig.from_dict(ckpt["config"])
    model = TextGraphPoseModel(config.model)
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model, config, ckpt


def _batch_tensors(dataset, split_name: str, model: TextGraphPoseModel):
    """Preload one split into padded tensors: images, gt coords, masks and prompt indices."""
    K = model.config.max_keypoints
    prompts: list[GraphPrompt] = []
    images, gts, vis_masks, prompt_idx = [], [], [], []
    for cat in dataset.categories(split_name):
        samples = dataset.samples(cat)
        if not samples:
            continue
        prompts.append(model.prompt(dataset.graph(cat)))
        for s in samples:
            img = s.load_image()
            h, w = img.shape[:2]
            gt = np.zeros((K, 2), dtype=np.float32)
            vis = np.zeros(K, dtype=bool)
            n = len(s.keypoints)
            gt[:n] = s.keypoints / np.array([w, h], dtype=np.float64)
            vis[:n] = s.visibility
            images.append(img)
            gts.append(gt)
            vis_masks.append(vis)
            prompt_idx.append(len(prompts) - 1)
    if not images:
        raise ValueError(f"split {split_name!r} has no samples")
    return (stack_images(images), torch.from_numpy(np.stack(gts)),
            torch.from_numpy(np.stack(vis_masks)), torch.tensor(prompt_idx), prompts)


def train(config: RunConfig, dataset: PoseDataset | None = None, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None) -> TrainResult:
    torch.set_num_threads(1)
    if dataset is None:
        dataset = load_dataset(config.resolved_data_root(), max_keypoints=config.model.max_keypoints)
    model = build_model(config)
    images, gts, vis, pidx, prompts = _batch_tensors(dataset, "train", model)
    text_raw = torch.stack([p.text_raw for p in prompts])
    kp_mask = torch.stack([p.mask for p in prompts])
    adjacency = torch.stack([p.adjacency for p in prompts])

    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    # closed form lr * gamma^(milestones passed), so logged rates are exact
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda e: config.gamma ** bisect.bisect_right(config.milestones, e))
    gen = torch.Generator().manual_seed(config.seed)
    n = images.shape[0]
    metrics: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            model.train()
            lr = optimizer.param_groups[0]["lr"]
            order = torch.randperm(n, generator=gen)
            sums = np.zeros(3)
            batches = 0
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                p = pidx[idx]
                mask = kp_mask[p]
                out = model(images[idx], text_raw[p], mask, adjacency[p])
                losses = compute_losses(out.heatmaps, out.layers.coords_per_layer, gts[idx],
                                        mask & vis[idx], config.sigma, config.lambda_heatmap)
                if not torch.isfinite(losses.total):
                    raise DivergenceError(epoch, b, losses.total.detach().item())
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), config.grad_clip)
                optimizer.step()
                sums += [t.detach().item() for t in (losses.total, losses.heatmap, losses.offset)]
                batches += 1
            scheduler.step()
            rec = {"epoch": epoch, "lr": lr, "train_loss": sums[0] / batches,
                   "train_heatmap": sums[1] / batches, "train_offset": sums[2] / batches}
            if config.validate and dataset.categories("val"):
                rec["val_pck"] = evaluate_model(model, dataset, "val",
                                                threshold=config.pck_threshold)["mean_pck"]
            metrics.append(rec)
            log.info("epoch %d %s", epoch, rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    model.eval()
    ckpt = make_checkpoint(model, config, config.epochs, optimizer, scheduler)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return TrainResult(model, config, metrics, ckpt)
