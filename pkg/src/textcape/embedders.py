"""Text and image feature extraction plus the projections into the model width.

The toy backends run fully offline. The precomputed backends read the
binary container from :mod:`textcape.tensorfile`, so features from any
external text or image model can be plugged in.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .posegraph import CapacityError
from .tensorfile import KIND_IMAGE, KIND_TEXT, TensorFileError, read_tensor


class EmbeddingError(ValueError):
    pass


def _tokens(description: str) -> list[str]:
    return description.lower().split()


def hash_word_vector(word: str, dim: int, seed: int = 0, num_hashes: int = 4) -> np.ndarray:
    """Signed feature-hashing vector of one lowercase word."""
    vec = np.zeros(dim, dtype=np.float64)
    for j in range(num_hashes):
        digest = hashlib.blake2b(f"{seed}:{j}:{word}".encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    return vec


def toy_text_embed(description: str, C_t: int, seed: int = 0, num_hashes: int = 4,
                   normalize: bool = True) -> np.ndarray:
    if C_t < 8:
        raise EmbeddingError(f"toy text dimension must be >= 8, got {C_t}")
    words = _tokens(description)
    if not words:
        raise EmbeddingError(f"description {description!r} has no tokens")
    vec = sum(hash_word_vector(w, C_t, seed, num_hashes) for w in words)
    if not normalize:
        return vec
    norm = np.linalg.norm(vec)
    if norm == 0:
        # only possible when signed buckets cancel exactly
        raise EmbeddingError(f"description {description!r} hashes to the zero vector")
    return vec / norm


def l2_normalize_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class ToyTextBackend(nn.Module):
    """Bag-of-hashed-words encoder followed by a C_t x C_t mixing layer.

    The mixing layer starts at identity, so untrained it reproduces
    ``toy_text_embed`` exactly. It is the backend's only parameter and the
    one that stays untouched when the backend is frozen.
    """

    def __init__(self, dim: int = 64, seed: int = 0, num_hashes: int = 4, frozen: bool = True,
                 normalization: str = "l2"):
        super().__init__()
        if dim < 8:
            raise EmbeddingError(f"toy text dimension must be >= 8, got {dim}")
        self.dim, self.seed, self.num_hashes = dim, seed, num_hashes
        self.normalization = normalization
        self.mixing = nn.Parameter(torch.eye(dim))
        self.set_frozen(frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.mixing.requires_grad_(not frozen)

    def raw(self, descriptions: Sequence[str]) -> torch.Tensor:
        rows = [toy_text_embed(d, self.dim, self.seed, self.num_hashes, normalize=False)
                for d in descriptions]
        return torch.tensor(np.stack(rows), dtype=torch.float32)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        out = raw @ self.mixing.t()
        if self.frozen:
            out = out.detach()
        return _normalize(out, self.normalization)


class PrecomputedTextBackend(nn.Module):
    """Looks descriptions up in a text container plus a sidecar list.

    ``<stem>.tcpf`` holds a (N, C_t) matrix; ``<stem>.txt`` holds the N
    descriptions, one per line, in row order.
    """

    def __init__(self, path: str | Path, normalization: str = "l2"):
        super().__init__()
        path = Path(path)
        _, rows = read_tensor(path.with_suffix(".tcpf"), expected_kind=KIND_TEXT)
        names = path.with_suffix(".txt").read_text(encoding="utf-8").splitlines()
        if len(names) != rows.shape[0]:
            raise TensorFileError(
                f"{path}: {len(names)} descriptions but {rows.shape[0]} embedding rows")
        self.table = {n.strip(): rows[i] for i, n in enumerate(names)}
        self.dim = rows.shape[1]
        self.normalization = normalization
        self.frozen = True

    def set_frozen(self, frozen: bool) -> None:
        if not frozen:
            raise EmbeddingError("precomputed text embeddings cannot be tuned")

    def raw(self, descriptions: Sequence[str]) -> torch.Tensor:
        out = []
        for d in descriptions:
            key = " ".join(d.split())
            if key not in self.table:
                raise EmbeddingError(f"no precomputed embedding for description {d!r}")
            out.append(self.table[key])
        return torch.tensor(np.stack(out), dtype=torch.float32)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return _normalize(raw, self.normalization)


def _normalize(x: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "l2":
        return l2_normalize_rows(x)
    if mode == "none":
        return x
    raise EmbeddingError(f"unknown text normalization {mode!r}")


def embed_texts(descriptions: Sequence[str], backend) -> torch.Tensor:
    """(K_s, C_t) row-normalised text embeddings."""
    if len(descriptions) == 0:
        raise EmbeddingError("no descriptions to embed")
    return backend(backend.raw(descriptions))


@dataclass
class ImageFeatureMap:
    tokens: torch.Tensor  # (B, h*w, C_i)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise EmbeddingError(
                f"{self.tokens.shape[-2]} tokens do not fill a {self.grid_h}x{self.grid_w} grid")


class ToyImageBackend(nn.Module):
    """Non-overlapping p x p patches, each mapped linearly to C_i channels."""

    def __init__(self, in_channels: int = 3, dim: int = 64, patch_size: int = 16):
        super().__init__()
        self.patch_size = patch_size
        self.dim = dim
        self.patch = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, images: torch.Tensor) -> ImageFeatureMap:
        # images: (B, channels, H, W)
        h, w = images.shape[-2:]
        p = self.patch_size
        if h % p or w % p:
            raise EmbeddingError(f"image size {h}x{w} is not divisible by patch size {p}")
        feat = self.patch(images)
        return ImageFeatureMap(feat.flatten(2).transpose(1, 2), h // p, w // p)


class PrecomputedImageBackend:
    """Loads ``<directory>/<key>.tcpf`` feature grids (kind image, shape (h, w, C_i))."""

    def __init__(self, directory: str | Path, grid: tuple[int, int] | None = None):
        self.directory = Path(directory)
        self.grid = grid

    def load(self, key: str) -> ImageFeatureMap:
        path = self.directory / f"{key}.tcpf"
        _, arr = read_tensor(path, expected_kind=KIND_IMAGE)
        if arr.ndim != 3:
            raise TensorFileError(f"{path}: expected (h, w, C) grid, got shape {arr.shape}")
        h, w, _ = arr.shape
        if self.grid is not None and (h, w) != tuple(self.grid):
            raise TensorFileError(f"{path}: grid {h}x{w} does not match expected {self.grid}")
        return ImageFeatureMap(torch.from_numpy(arr.reshape(1, h * w, -1).copy()), h, w)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, ch) uint8 or float array -> (1, ch, H, W) float in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float()
    if arr.dtype == np.uint8:
        t = t / 255.0
    return t.unsqueeze(0)


def embed_image(image, backend) -> ImageFeatureMap:
    if isinstance(backend, PrecomputedImageBackend):
        return backend.load(str(image))
    return backend(image_to_tensor(image))


@dataclass
class ProjectedFeatures:
    support: torch.Tensor  # (B, K, C); zero rows where the mask is false
    query: torch.Tensor  # (B, h*w, C)
    keypoint_mask: torch.Tensor  # (B, K) bool
    grid_h: int
    grid_w: int


class FeatureProjector(nn.Module):
    """Per-token affine maps: C_i -> C for image tokens and C_t -> C for text rows."""

    def __init__(self, text_dim: int, image_dim: int, model_dim: int):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, model_dim)
        self.image_proj = nn.Linear(image_dim, model_dim)

    def forward(self, text: torch.Tensor, image: ImageFeatureMap,
                keypoint_mask: torch.Tensor) -> ProjectedFeatures:
        # text: (B, K, C_t) already zero-padded
        support = self.text_proj(text) * keypoint_mask.unsqueeze(-1).to(text.dtype)
        query = self.image_proj(image.tokens)
        return ProjectedFeatures(support, query, keypoint_mask, image.grid_h, image.grid_w)


def pad_rows(rows: torch.Tensor, K: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad (K_s, C) rows to (K, C) and return the keypoint mask."""
    n = rows.shape[0]
    if K < n:
        raise CapacityError(f"capacity K={K} is smaller than {n} keypoints")
    padded = F.pad(rows, (0, 0, 0, K - n))
    mask = torch.zeros(K, dtype=torch.bool)
    mask[:n] = True
    return padded, mask


def project_features(text: torch.Tensor, image: ImageFeatureMap, K: int,
                     projector: FeatureProjector) -> ProjectedFeatures:
    """Single-instance projection: ``text`` is (K_s, C_t), ``image`` has batch size 1."""
    padded, mask = pad_rows(text, K)
    return projector(padded.unsqueeze(0), image, mask.unsqueeze(0))
