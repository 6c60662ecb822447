"""Procedural category-agnostic pose data.

Every category is an articulated 2-D creature: a vertical body axis with a
subset of named axis points and one to three mirrored limb pairs. Keypoint
names come from one shared vocabulary ("left knee", "right wing tip", ...)
so names recur across categories with the same meaning and appearance.
Each named body part is drawn as a blob with its own fixed colour.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import SCHEMA_VERSION, CategorySplit, write_split
from .perturb import apply_synonyms, load_synonym_table
from .posegraph import PoseGraph, save_posegraph

MIN_IMAGE_SIZE = 32

AXIS_POINTS = {
    "head top": (0.0, -1.0),
    "neck": (0.0, -0.6),
    "body center": (0.0, 0.0),
    "tail base": (0.0, 0.55),
    "tail tip": (0.0, 1.05),
}
LIMB_TEMPLATES = {
    "arm": {"joints": ["shoulder", "elbow", "wrist"], "anchor": "neck", "base": (0.25, -0.5)},
    "leg": {"joints": ["hip", "knee", "ankle"], "anchor": "tail base", "base": (0.22, 0.45)},
    "wing": {"joints": ["wing base", "wing middle", "wing tip"], "anchor": "body center",
             "base": (0.2, -0.15)},
    "fin": {"joints": ["fin base", "fin tip"], "anchor": "body center", "base": (0.18, 0.2)},
}
SIDES = ("left", "right")


class SyntheticError(ValueError):
    pass


def default_vocabulary() -> list[str]:
    names = list(AXIS_POINTS)
    for limb in LIMB_TEMPLATES.values():
        names += [f"{side} {j}" for side in SIDES for j in limb["joints"]]
    return names


def concept_palette(names: list[str]) -> dict[str, tuple[int, int, int]]:
    """Greedy farthest-point colours, bright enough to stand out from the background."""
    levels = np.arange(0, 256, 51)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    grid = grid[(grid.max(1) >= 150) & (grid.max(1) - grid.min(1) >= 100)].astype(np.float64)
    chosen = [int(np.argmin(np.abs(grid - [255, 0, 0]).sum(1)))]
    dist = np.linalg.norm(grid - grid[chosen[0]], axis=1)
    while len(chosen) < len(names):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(grid - grid[nxt], axis=1))
    return {n: tuple(int(v) for v in grid[i]) for n, i in zip(names, chosen)}


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_categories: int = 12
    samples_per_category: int = 100
    image_size: int = 64
    n_val: int = 2
    n_test: int = 2
    max_keypoints: int = 20
    vocabulary: list[str] = field(default_factory=default_vocabulary)
    topology_templates: list[str] = field(default_factory=lambda: list(LIMB_TEMPLATES))
    alt_phrasing_prob: float = 0.5
    synonym_table: dict[str, str] | None = None

    @property
    def n_train(self) -> int:
        return self.n_categories - self.n_val - self.n_test


@dataclass
class CategoryTemplate:
    name: str
    concepts: list[str]  # canonical names, keypoint order
    texts: list[str]  # descriptions as annotated for this category
    edges: list[tuple[int, int]]
    axis: dict[str, tuple[float, float]]
    limbs: dict[str, dict]  # limb -> base offset, angle, bends, lengths

    @property
    def topology(self) -> tuple:
        return (tuple(self.axis), tuple(self.limbs))

    def graph(self, max_keypoints: int) -> PoseGraph:
        return PoseGraph.from_texts(self.texts, self.edges, self.name, max_keypoints)


def _make_template(name: str, rng: np.random.Generator, spec: SyntheticSpec,
                   table: dict[str, str]) -> CategoryTemplate | None:
    axis_names = ["body center"]
    for n in ("head top", "neck", "tail base", "tail tip"):
        if rng.random() < 0.6:
            axis_names.append(n)
    axis_names = [n for n in AXIS_POINTS if n in axis_names and n in spec.vocabulary]
    if len(axis_names) < 2:
        return None
    axis = {}
    for n in axis_names:
        x, y = AXIS_POINTS[n]
        axis[n] = (x, y * float(rng.uniform(0.8, 1.2)))

    templates = [t for t in spec.topology_templates if t in LIMB_TEMPLATES]
    n_limbs = int(rng.integers(1, min(3, len(templates)) + 1))
    limb_names = sorted(rng.choice(templates, size=n_limbs, replace=False).tolist(),
                        key=list(LIMB_TEMPLATES).index)
    limbs = {}
    for limb in limb_names:
        tpl = LIMB_TEMPLATES[limb]
        n_j = len(tpl["joints"])
        limbs[limb] = {
            "base": (tpl["base"][0] * float(rng.uniform(0.8, 1.3)), tpl["base"][1]),
            "angle": float(rng.uniform(-1.0, 1.1)),  # radians below horizontal, right side
            "bends": [float(b) for b in rng.uniform(-0.7, 0.7, n_j - 2)],
            "lengths": [float(v) for v in rng.uniform(0.3, 0.5, n_j - 1)],
        }

    concepts, edges = list(axis_names), [(i, i + 1) for i in range(len(axis_names) - 1)]
    for limb, params in limbs.items():
        tpl = LIMB_TEMPLATES[limb]
        anchor_y = AXIS_POINTS[tpl["anchor"]][1]
        anchor = min(axis_names, key=lambda n: abs(AXIS_POINTS[n][1] - anchor_y))
        for side in SIDES:
            start = len(concepts)
            concepts += [f"{side} {j}" for j in tpl["joints"]]
            edges.append((axis_names.index(anchor), start))
            edges += [(start + j, start + j + 1) for j in range(len(tpl["joints"]) - 1)]
    if len(concepts) > spec.max_keypoints or any(c not in spec.vocabulary for c in concepts):
        return None

    # annotators phrase the same part differently across categories
    texts = list(concepts)
    phrased = {}
    for i, c in enumerate(concepts):
        part = c.split(" ", 1)[1] if c.split(" ", 1)[0] in SIDES else c
        if part not in phrased:
            phrased[part] = rng.random() < spec.alt_phrasing_prob
        if phrased[part]:
            texts[i] = apply_synonyms(c, table)
    return CategoryTemplate(name, concepts, texts, edges, axis, limbs)


def pose_points(tpl: CategoryTemplate, rng: np.random.Generator | None, jitter: float = 0.26):
    """Canonical (K_s, 2) keypoint positions, optionally with random joint jitter."""
    def j(scale=1.0):
        return float(rng.uniform(-jitter, jitter)) * scale if rng is not None else 0.0

    pts = {n: (x + j(0.2), y + j(0.2)) for n, (x, y) in tpl.axis.items()}
    for limb, p in tpl.limbs.items():
        tpl_l = LIMB_TEMPLATES[limb]
        for side in SIDES:
            sgn = -1.0 if side == "left" else 1.0
            bx, by = p["base"]
            cur = (sgn * bx + j(0.2), by + j(0.2))
            pts[f"{side} {tpl_l['joints'][0]}"] = cur
            ang = p["angle"] + j()
            for k, length in enumerate(p["lengths"]):
                if k > 0:
                    ang += p["bends"][k - 1] + j()
                length *= 1.0 + j(0.4)
                cur = (cur[0] + sgn * length * math.cos(ang), cur[1] + length * math.sin(ang))
                pts[f"{side} {tpl_l['joints'][k + 1]}"] = cur
    return np.array([pts[c] for c in tpl.concepts], dtype=np.float64)


def place_pose(points: np.ndarray, image_size: int, rng: np.random.Generator,
               margin: float) -> np.ndarray:
    theta = float(rng.uniform(-0.35, 0.35))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    pts = points @ rot.T
    pts -= pts.min(0)
    long_side = max(float(pts.max()), 1e-6)
    target = image_size * float(rng.uniform(0.55, 0.8))
    pts *= min(target / long_side, (image_size - 2 * margin) / long_side)
    extent = pts.max(0)
    off = [rng.uniform(margin, image_size - margin - e) for e in extent]
    return pts + np.asarray(off)


def render(points: np.ndarray, edges, colors: list[tuple[int, int, int]], image_size: int,
           rng: np.random.Generator | None = None, blob_radius: float | None = None,
           line_width: float | None = None) -> np.ndarray:
    """Anti-aliased skeleton strokes and joint blobs over a noisy background."""
    s = image_size / 64.0
    r = blob_radius if blob_radius is not None else 2.6 * s
    lw = line_width if line_width is not None else 1.2 * s
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    if rng is not None:
        base = float(rng.uniform(15, 45))
        img = base + rng.normal(0, 6, (image_size, image_size, 1)) * np.ones((1, 1, 3))
    else:
        img = np.full((image_size, image_size, 3), 30.0)

    for a, b in edges:
        p, q = points[a], points[b]
        d = q - p
        t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / max(d @ d, 1e-9), 0, 1)
        dist = np.hypot(xx - p[0] - t * d[0], yy - p[1] - t * d[1])
        cov = np.clip(lw / 2 + 0.5 - dist, 0, 1)[..., None]
        img = img * (1 - cov) + 140.0 * cov
    for (x, y), color in zip(points, colors):
        dist = np.hypot(xx - x, yy - y)
        cov = np.clip(r + 0.5 - dist, 0, 1)[..., None]
        img = img * (1 - cov) + np.asarray(color, dtype=np.float64) * cov
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _bbox(points: np.ndarray, pad: float, size: int) -> list[float]:
    lo = np.clip(points.min(0) - pad, 0, size)
    hi = np.clip(points.max(0) + pad, 0, size)
    return [float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1])]


def build_templates(spec: SyntheticSpec) -> tuple[list[CategoryTemplate], CategorySplit]:
    if spec.n_train < 1:
        raise SyntheticError("need at least one training category")
    table = spec.synonym_table if spec.synonym_table is not None else load_synonym_table()
    templates: list[CategoryTemplate] = []
    topologies = set()
    train_concepts: set[str] = set()
    for idx in range(spec.n_categories):
        for attempt in range(10_000):
            rng = np.random.default_rng([spec.seed, idx, attempt])
            tpl = _make_template(f"synth{idx:02d}", rng, spec, table)
            if tpl is None or tpl.topology in topologies:
                continue
            # unseen categories reuse seen parts in new arrangements
            if idx >= spec.n_train and not set(tpl.concepts) <= train_concepts:
                continue
            break
        else:
            raise SyntheticError(f"could not build a distinct template for category {idx}")
        topologies.add(tpl.topology)
        if idx < spec.n_train:
            train_concepts |= set(tpl.concepts)
        templates.append(tpl)
    names = [t.name for t in templates]
    split = CategorySplit.from_lists(names[:spec.n_train],
                                     names[spec.n_train:spec.n_train + spec.n_val],
                                     names[spec.n_train + spec.n_val:])
    return templates, split


def synth_generate(spec: SyntheticSpec, out_dir: str | Path) -> CategorySplit:
    """Write images, annotations, pose graphs and the split file under ``out_dir``."""
    if spec.image_size < MIN_IMAGE_SIZE:
        raise SyntheticError(f"image_size {spec.image_size} is below the minimum {MIN_IMAGE_SIZE}")
    if not spec.vocabulary or not spec.topology_templates:
        raise SyntheticError("vocabulary and topology templates must be non-empty")
    out = Path(out_dir)
    for sub in ("images", "annotations", "posegraphs"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    templates, split = build_templates(spec)
    palette = concept_palette(default_vocabulary())
    size = spec.image_size
    margin = 4.0 * size / 64.0
    records: dict[str, list[dict]] = {n: [] for n in ("train", "val", "test")}
    for cat_idx, tpl in enumerate(templates):
        save_posegraph(tpl.graph(spec.max_keypoints), out / "posegraphs" / f"{tpl.name}.posegraph")
        colors = [palette[c] for c in tpl.concepts]
        for n in range(spec.samples_per_category):
            rng = np.random.default_rng([spec.seed, 1000 + cat_idx, n])
            pts = place_pose(pose_points(tpl, rng), size, rng, margin)
            img = render(pts, tpl.edges, colors, size, rng)
            sid = f"{tpl.name}_{n:04d}"
            Image.fromarray(img).save(out / "images" / f"{sid}.png")
            records[split.split_of(tpl.name)].append({
                "id": sid,
                "image": f"images/{sid}.png",
                "category": tpl.name,
                "bbox": _bbox(pts, 2.6 * size / 64.0, size),
                "keypoints": [[round(float(x), 4), round(float(y), 4)] for x, y in pts],
                "visibility": [True] * len(pts),
            })
    for name, recs in records.items():
        doc = {"version": SCHEMA_VERSION, "split": name, "samples": recs}
        (out / "annotations" / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
    write_split(out, split)
    meta = asdict(spec)
    meta["version"] = SCHEMA_VERSION
    (out / "synthetic.json").write_text(json.dumps(meta, indent=1) + "\n")
    return split
