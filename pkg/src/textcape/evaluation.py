"""PCK evaluation, occlusion sweeps and text-robustness reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datasets import DatasetSample, PoseDataset
from .decoder import attention_maps
from .objectives import pck
from .perturb import apply_mask, load_synonym_table, text_perturb
from .posegraph import PoseGraph

# (samples of one category, its graph, global sample indices) -> (N, K_s, 2) pixel predictions
BatchPredictor = Callable[[list[DatasetSample], PoseGraph, list[int]], np.ndarray]


def stack_images(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return t / 255.0 if arr.dtype == np.uint8 else t


def mask_seed(seed: int, sample_index: int, fraction: float) -> int:
    ss = np.random.SeedSequence([seed, sample_index, int(round(fraction * 1_000_000))])
    return int(ss.generate_state(1)[0])


@torch.no_grad()
def predict(model, graph: PoseGraph, images: Sequence[np.ndarray], texts: list[str] | None = None,
            batch_size: int = 64, trace: bool = False):
    """Pixel-space (N, K_s, 2) predictions for images of one category."""
    model.eval()
    prompt = model.prompt(graph, texts)
    n_kp = prompt.num_keypoints
    preds, maps = [], []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = stack_images(chunk)
        b = x.shape[0]
        out = model(x, prompt.text_raw.expand(b, -1, -1), prompt.mask.expand(b, -1),
                    prompt.adjacency.expand(b, -1, -1), trace=trace)
        h, w = x.shape[-2:]
        scale = torch.tensor([w, h], dtype=out.coords.dtype)
        preds.append((out.coords[:, :n_kp] * scale).numpy().astype(np.float64))
        if trace:
            maps.append(attention_maps(out.layers)[:, :, :n_kp])
    coords = np.concatenate(preds)
    if trace:
        return coords, torch.cat(maps, dim=1).numpy()
    return coords


def model_predictor(model, texts_for: Callable[[PoseGraph], list[str]] | None = None,
                    image_transform: Callable[[np.ndarray, int], np.ndarray] | None = None):
    """Batch predictor closure used by :func:`evaluate_samples`."""
    def run(samples: list[DatasetSample], graph: PoseGraph, indices: list[int]) -> np.ndarray:
        imgs = [s.load_image() for s in samples]
        if image_transform is not None:
            imgs = [image_transform(im, i) for im, i in zip(imgs, indices)]
        texts = texts_for(graph) if texts_for is not None else None
        return predict(model, graph, imgs, texts)
    return run


def center_predictor(samples: list[DatasetSample], graph: PoseGraph, indices) -> np.ndarray:
    """Constant baseline: every keypoint at the image centre."""
    out = []
    for s in samples:
        h, w = s.load_image().shape[:2]
        out.append(np.tile([w / 2.0, h / 2.0], (graph.num_keypoints, 1)))
    return np.stack(out)


def oracle_predictor(samples: list[DatasetSample], graph: PoseGraph, indices) -> np.ndarray:
    return np.stack([s.keypoints for s in samples])


def evaluate_samples(dataset: PoseDataset, split: str, batch_predict: BatchPredictor,
                     threshold: float = 0.2) -> tuple[dict, dict]:
    """Mean over categories of per-category mean per-sample PCK."""
    categories = {}
    predictions = {}
    index = 0
    for cat in dataset.categories(split):
        graph = dataset.graph(cat)
        samples = dataset.samples(cat)
        idx = list(range(index, index + len(samples)))
        index += len(samples)
        if not samples:
            continue
        preds = batch_predict(samples, graph, idx)
        scores = [pck(p, s.keypoints, s.bbox[2:], threshold, s.visibility)
                  for p, s in zip(preds, samples) if s.visibility.any()]
        categories[cat] = {"pck": float(np.mean(scores)) if scores else float("nan"),
                           "n_samples": len(samples), "n_keypoints": graph.num_keypoints}
        predictions[cat] = preds
    values = [c["pck"] for c in categories.values() if not np.isnan(c["pck"])]
    report = {"split": split, "threshold": threshold,
              "mean_pck": float(np.mean(values)) if values else float("nan"),
              "categories": categories}
    return report, predictions


def evaluate_model(model, dataset: PoseDataset, split: str = "test", threshold: float = 0.2,
                   predictor=None) -> dict:
    report, _ = evaluate_samples(dataset, split, predictor or model_predictor(model), threshold)
    return report


def evaluate(checkpoint, split: str, dataset: PoseDataset, threshold: float = 0.2,
             out_path: str | Path | None = None, predictor=None) -> dict:
    """Evaluate a checkpoint (path, dict or model) and optionally write the JSON report."""
    model = _as_model(checkpoint)
    report = evaluate_model(model, dataset, split, threshold, predictor)
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=1) + "\n")
    return report


def _as_model(checkpoint):
    if isinstance(checkpoint, torch.nn.Module):
        return checkpoint
    from .training import load_checkpoint
    return load_checkpoint(checkpoint)[0]


def mask_sweep(checkpoint, fractions: Sequence[float], dataset: PoseDataset, seed: int = 0,
               split: str = "test", threshold: float = 0.2, out_csv: str | Path | None = None,
               fill=0) -> list[tuple[float, float]]:
    model = _as_model(checkpoint)
    rows = []
    for f in fractions:
        if not 0 <= f <= 1:
            raise ValueError(f"mask fraction {f} outside [0, 1]")
        transform = (lambda im, i, f=f: apply_mask(im, f, mask_seed(seed, i, f), fill))
        report = evaluate_model(model, dataset, split, threshold,
                                model_predictor(model, image_transform=transform))
        rows.append((float(f), report["mean_pck"]))
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["fraction", "mean_pck"])
            wr.writerows(rows)
    return rows


def robustness(checkpoint, modes: Sequence[str], dataset: PoseDataset, seed: int = 0,
               synonym_table: dict[str, str] | str | Path | None = None, split: str = "test",
               threshold: float = 0.2, out_dir: str | Path | None = None) -> dict:
    """PCK under perturbed descriptions plus per-keypoint displacement vs. the originals.

    Displacement is the mean pixel distance between predictions made with
    the perturbed and the original descriptions, per keypoint.
    """
    model = _as_model(checkpoint)
    for m in modes:
        if m not in ("identity", "synonym", "typo"):
            raise ValueError(f"unknown robustness mode {m!r}")
    if "synonym" in modes:
        if synonym_table is None:
            raise ValueError("synonym mode needs a synonym table")
        if not isinstance(synonym_table, dict):
            synonym_table = load_synonym_table(synonym_table)

    base_report, base_preds = evaluate_samples(dataset, split, model_predictor(model), threshold)
    result = {"split": split, "unperturbed_pck": base_report["mean_pck"], "modes": {}}
    rows = []
    for mode in modes:
        texts_for = (lambda g, mode=mode: text_perturb(
            g.texts, mode, int(np.random.SeedSequence([seed, sum(map(ord, g.category))])
                               .generate_state(1)[0]), synonym_table))
        report, preds = evaluate_samples(dataset, split, model_predictor(model, texts_for), threshold)
        mode_rows = []
        for cat, p in preds.items():
            graph = dataset.graph(cat)
            new_texts = texts_for(graph)
            disp = np.linalg.norm(p - base_preds[cat], axis=-1).mean(axis=0)
            for k in range(graph.num_keypoints):
                mode_rows.append({"mode": mode, "category": cat, "keypoint": k,
                                  "original": graph.texts[k], "perturbed": new_texts[k],
                                  "mean_displacement": float(disp[k])})
        rows.extend(mode_rows)
        result["modes"][mode] = {
            "mean_pck": report["mean_pck"],
            "categories": {c: v["pck"] for c, v in report["categories"].items()},
            "mean_displacement": float(np.mean([r["mean_displacement"] for r in mode_rows])),
        }
    result["displacements"] = rows
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "displacement.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["mode", "category", "keypoint", "original",
                                                "perturbed", "mean_displacement"])
            wr.writeheader()
            wr.writerows(rows)
        summary = {k: v for k, v in result.items() if k != "displacements"}
        (out / "robustness.json").write_text(json.dumps(summary, indent=1) + "\n")
    return result
