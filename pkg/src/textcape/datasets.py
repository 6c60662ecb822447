"""Annotated pose datasets on disk, with category-disjoint splits.

Layout of a dataset root::

    splits.json                  {"version": 1, "train": [...], "val": [...], "test": [...]}
    posegraphs/<category>.posegraph
    annotations/<split>.json     {"version": 1, "split": ..., "samples": [...]}
    images/<id>.png

Each sample record holds ``id``, ``image`` (path relative to the root),
``category``, ``bbox`` as [x, y, w, h], ``keypoints`` as [[x, y], ...] in
pixels and ``visibility`` as booleans.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .posegraph import DEFAULT_MAX_KEYPOINTS, PoseGraph, PoseGraphError, load_posegraph

SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Schema or consistency problem in a dataset on disk."""


class SplitOverlapError(DatasetError):
    pass


@dataclass(frozen=True)
class CategorySplit:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        for name in SPLIT_NAMES:
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        overlap = (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        if overlap:
            raise SplitOverlapError(
                f"splits must be mutually exclusive; categories in more than one split: "
                f"{sorted(overlap)}")

    @classmethod
    def from_lists(cls, train: Iterable[str], val: Iterable[str], test: Iterable[str]):
        return cls(frozenset(train), frozenset(val), frozenset(test))

    def get(self, name: str) -> frozenset[str]:
        if name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def split_of(self, category: str) -> str | None:
        for name in SPLIT_NAMES:
            if category in getattr(self, name):
                return name
        return None

    @property
    def all(self) -> frozenset[str]:
        return self.train | self.val | self.test

    def to_json(self) -> dict:
        return {"version": SCHEMA_VERSION, **{n: sorted(getattr(self, n)) for n in SPLIT_NAMES}}


@dataclass
class DatasetSample:
    id: str
    image_path: Path
    category: str
    bbox: tuple[float, float, float, float]
    keypoints: np.ndarray  # (K_s, 2) pixels
    visibility: np.ndarray  # (K_s,) bool
    image: np.ndarray | None = field(default=None, repr=False)

    @property
    def posegraph_ref(self) -> str:
        return self.category

    def load_image(self) -> np.ndarray:
        if self.image is None:
            with Image.open(self.image_path) as im:
                self.image = np.asarray(im.convert("RGB"))
        return self.image

    def to_record(self, root: Path) -> dict:
        return {
            "id": self.id,
            "image": self.image_path.relative_to(root).as_posix(),
            "category": self.category,
            "bbox": [float(v) for v in self.bbox],
            "keypoints": [[float(x), float(y)] for x, y in self.keypoints],
            "visibility": [bool(v) for v in self.visibility],
        }


class PoseDataset:
    """Samples grouped by category plus the pose graph of every category."""

    def __init__(self, root: Path, split: CategorySplit, graphs: dict[str, PoseGraph],
                 by_category: dict[str, list[DatasetSample]]):
        self.root = root
        self.split = split
        self._graphs = graphs
        self._by_category = by_category

    def categories(self, split_name: str | None = None) -> list[str]:
        cats = self._by_category.keys() if split_name is None else self.split.get(split_name)
        return sorted(cats)

    def graph(self, category: str) -> PoseGraph:
        try:
            return self._graphs[category]
        except KeyError:
            raise DatasetError(f"category {category!r} has no pose graph") from None

    def samples(self, category: str) -> list[DatasetSample]:
        return self._by_category.get(category, [])

    def split_samples(self, split_name: str) -> list[DatasetSample]:
        out = []
        for cat in self.categories(split_name):
            out.extend(self.samples(cat))
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_category.values())


class AuditedDataset:
    """Wraps a dataset and records every category whose data is touched."""

    def __init__(self, inner: PoseDataset):
        self.inner = inner
        self.accessed: set[str] = set()

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def graph(self, category: str) -> PoseGraph:
        self.accessed.add(category)
        return self.inner.graph(category)

    def samples(self, category: str) -> list[DatasetSample]:
        self.accessed.add(category)
        return self.inner.samples(category)

    def split_samples(self, split_name: str) -> list[DatasetSample]:
        out = []
        for cat in self.inner.categories(split_name):
            out.extend(self.samples(cat))
        return out


def _read_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema version {doc.get('version')!r}")
    return doc


def read_split(root: str | Path) -> CategorySplit:
    doc = _read_json(Path(root) / "splits.json")
    return CategorySplit.from_lists(*(doc.get(n, []) for n in SPLIT_NAMES))


def write_split(root: str | Path, split: CategorySplit) -> None:
    (Path(root) / "splits.json").write_text(json.dumps(split.to_json(), indent=1) + "\n")


def _parse_sample(rec: dict, root: Path, where: str) -> DatasetSample:
    try:
        kps = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 2)
        vis = np.asarray(rec["visibility"], dtype=bool)
        bbox = tuple(float(v) for v in rec["bbox"])
        sample = DatasetSample(str(rec["id"]), root / rec["image"], str(rec["category"]),
                               bbox, kps, vis)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed sample record ({exc})") from None
    if len(bbox) != 4:
        raise DatasetError(f"{where}: bbox must have 4 values")
    if len(vis) != len(kps):
        raise DatasetError(f"{where}: {len(kps)} keypoints but {len(vis)} visibility flags")
    return sample


def load_dataset(root: str | Path, split: CategorySplit | None = None,
                 max_keypoints: int = DEFAULT_MAX_KEYPOINTS, check_images: bool = False) -> PoseDataset:
    """Load and validate every annotation file under ``root``.

    ``split`` overrides ``splits.json``. Split disjointness, pose-graph
    presence and keypoint counts are checked here, before any training.
    """
    root = Path(root)
    split = split if split is not None else read_split(root)
    # CategorySplit validates disjointness at construction; re-check for hand-built instances
    CategorySplit(split.train, split.val, split.test)

    ann_dir = root / "annotations"
    files = sorted(ann_dir.glob("*.json")) if ann_dir.is_dir() else []
    if not files:
        raise DatasetError(f"no annotation files under {ann_dir}")
    by_category: dict[str, list[DatasetSample]] = {}
    for path in files:
        doc = _read_json(path)
        for n, rec in enumerate(doc.get("samples", [])):
            s = _parse_sample(rec, root, f"{path.name}[{n}]")
            by_category.setdefault(s.category, []).append(s)

    uncovered = set(by_category) - split.all
    if uncovered:
        raise DatasetError(f"categories not assigned to any split: {sorted(uncovered)}")

    graphs: dict[str, PoseGraph] = {}
    for cat in sorted(split.all | set(by_category)):
        gpath = root / "posegraphs" / f"{cat}.posegraph"
        if not gpath.exists():
            raise DatasetError(f"category {cat!r} has no pose graph at {gpath}")
        try:
            graphs[cat] = load_posegraph(gpath, max_keypoints)
        except PoseGraphError as exc:
            raise DatasetError(f"{gpath}: {exc}") from None

    for cat, samples in by_category.items():
        k = graphs[cat].num_keypoints
        for s in samples:
            if len(s.keypoints) != k:
                raise DatasetError(
                    f"sample {s.id}: {len(s.keypoints)} keypoints but category {cat!r} "
                    f"pose graph has {k}")
            if check_images:
                _check_in_bounds(s)
    return PoseDataset(root, split, graphs, by_category)


def _check_in_bounds(s: DatasetSample) -> None:
    img = s.load_image()
    h, w = img.shape[:2]
    vis = s.keypoints[s.visibility]
    if len(vis) and (vis.min() < 0 or vis[:, 0].max() > w or vis[:, 1].max() > h):
        raise DatasetError(f"sample {s.id}: visible keypoint outside the {w}x{h} image")
