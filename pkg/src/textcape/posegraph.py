"""Text-described pose graphs: schema, canonical text form and GCN adjacency.

A pose graph document looks like::

    posegraph 1
    category quadruped
    kp 0 head top
    kp 1 body center
    edge 0 1

Blank lines and lines starting with ``#`` are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1
DEFAULT_MAX_KEYPOINTS = 100


class PoseGraphError(ValueError):
    """Base class for every pose-graph validation or parse failure."""


class MalformedDocumentError(PoseGraphError):
    pass


class DuplicateIndexError(PoseGraphError):
    pass


class NonContiguousIndexError(PoseGraphError):
    pass


class EmptyTextError(PoseGraphError):
    pass


class EdgeOutOfRangeError(PoseGraphError):
    pass


class DuplicateEdgeError(PoseGraphError):
    pass


class SelfLoopError(PoseGraphError):
    pass


class CapacityError(PoseGraphError):
    pass


@dataclass(frozen=True)
class KeypointDescriptor:
    index: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyTextError(f"keypoint {self.index} has an empty description")
        # canonical form: single spaces, no surrounding whitespace
        object.__setattr__(self, "text", " ".join(self.text.split()))


@dataclass(frozen=True)
class Skeleton:
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        seen = set()
        for a, b in self.edges:
            if a == b:
                raise SelfLoopError(f"self-loop edge ({a}, {b})")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise DuplicateEdgeError(f"duplicate edge ({a}, {b})")
            seen.add(key)


@dataclass(frozen=True)
class PoseGraph:
    keypoints: tuple[KeypointDescriptor, ...]
    skeleton: Skeleton = field(default_factory=Skeleton)
    category: str = ""
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS

    def __post_init__(self):
        n = len(self.keypoints)
        if not 1 <= n <= self.max_keypoints:
            raise CapacityError(
                f"pose graph has {n} keypoints; allowed range is 1..{self.max_keypoints}")
        indices = [kp.index for kp in self.keypoints]
        if len(set(indices)) != n:
            dup = sorted({i for i in indices if indices.count(i) > 1})
            raise DuplicateIndexError(f"duplicate keypoint indices {dup}")
        if indices != list(range(n)):
            raise NonContiguousIndexError(
                f"keypoint indices must be 0..{n - 1} in order, got {indices}")
        for a, b in self.skeleton.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise EdgeOutOfRangeError(
                    f"edge ({a}, {b}) references a keypoint outside 0..{n - 1}")

    @classmethod
    def from_texts(cls, texts: Iterable[str], edges: Iterable[tuple[int, int]] = (),
                   category: str = "", max_keypoints: int = DEFAULT_MAX_KEYPOINTS) -> "PoseGraph":
        kps = tuple(KeypointDescriptor(i, t) for i, t in enumerate(texts))
        return cls(kps, Skeleton(tuple((int(a), int(b)) for a, b in edges)), category, max_keypoints)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def texts(self) -> list[str]:
        return [kp.text for kp in self.keypoints]

    def with_texts(self, texts: list[str]) -> "PoseGraph":
        """Same skeleton and category, new descriptions."""
        return PoseGraph.from_texts(texts, self.skeleton.edges, self.category, self.max_keypoints)

    def permuted(self, perm) -> "PoseGraph":
        """Relabel keypoints so that new index ``j`` holds old keypoint ``perm[j]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        texts = [self.keypoints[old].text for old in perm]
        edges = [(inv[a], inv[b]) for a, b in self.skeleton.edges]
        return PoseGraph.from_texts(texts, edges, self.category, self.max_keypoints)


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: np.ndarray
    valid_count: int

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_adjacency(graph: PoseGraph, K: int) -> NormalizedAdjacency:
    """Symmetric renormalised adjacency D^-1/2 (A + I) D^-1/2 over K nodes.

    Nodes K_s..K-1 are padding; they only carry their self-loop, so their
    rows and columns are exactly the identity.
    """
    n = graph.num_keypoints
    if K < n:
        raise CapacityError(f"capacity K={K} is smaller than the graph's {n} keypoints")
    a = np.eye(K, dtype=np.float64)
    for i, j in graph.skeleton.edges:
        if i >= n or j >= n:
            raise EdgeOutOfRangeError(f"edge ({i}, {j}) references a keypoint outside 0..{n - 1}")
        a[i, j] = a[j, i] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    matrix = d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]
    matrix.setflags(write=False)
    return NormalizedAdjacency(matrix, n)


def serialize_posegraph(graph: PoseGraph) -> str:
    lines = [f"posegraph {FORMAT_VERSION}", f"category {graph.category}"]
    for kp in graph.keypoints:
        # descriptions are stored trimmed and on one line
        lines.append(f"kp {kp.index} {' '.join(kp.text.split())}")
    for a, b in graph.skeleton.edges:
        lines.append(f"edge {a} {b}")
    return "\n".join(lines) + "\n"


def _int(token: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedDocumentError(f"line {lineno}: expected an integer, got {token!r}") from None


def parse_posegraph(document: str, max_keypoints: int = DEFAULT_MAX_KEYPOINTS) -> PoseGraph:
    lines = [(n, ln.strip()) for n, ln in enumerate(document.splitlines(), 1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0][1].split()[0] != "posegraph":
        raise MalformedDocumentError("missing 'posegraph <version>' header")
    n0, header = lines[0]
    parts = header.split()
    if len(parts) != 2 or _int(parts[1], n0) != FORMAT_VERSION:
        raise MalformedDocumentError(f"line {n0}: unsupported header {header!r}")

    category = ""
    keypoints: list[KeypointDescriptor] = []
    edges: list[tuple[int, int]] = []
    for lineno, line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "category":
            category = rest.strip()
        elif tag == "kp":
            idx_tok, _, text = rest.strip().partition(" ")
            if not idx_tok:
                raise MalformedDocumentError(f"line {lineno}: 'kp' needs an index")
            idx = _int(idx_tok, lineno)
            if not text.strip():
                raise EmptyTextError(f"line {lineno}: keypoint {idx} has an empty description")
            keypoints.append(KeypointDescriptor(idx, text.strip()))
        elif tag == "edge":
            toks = rest.split()
            if len(toks) != 2:
                raise MalformedDocumentError(f"line {lineno}: 'edge' needs two indices")
            edges.append((_int(toks[0], lineno), _int(toks[1], lineno)))
        else:
            raise MalformedDocumentError(f"line {lineno}: unknown record {tag!r}")

    keypoints.sort(key=lambda kp: kp.index)
    n = len(keypoints)
    # edge range is checked before Skeleton so the diagnostic names the edge
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise EdgeOutOfRangeError(
                f"edge ({a}, {b}) references a keypoint outside 0..{n - 1}")
    return PoseGraph(tuple(keypoints), Skeleton(tuple(edges)), category, max_keypoints)


def load_posegraph(path: str | Path, max_keypoints: int = DEFAULT_MAX_KEYPOINTS) -> PoseGraph:
    return parse_posegraph(Path(path).read_text(encoding="utf-8"), max_keypoints)


def save_posegraph(graph: PoseGraph, path: str | Path) -> None:
    Path(path).write_text(serialize_posegraph(graph), encoding="utf-8")
