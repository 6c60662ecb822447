"""End-to-end model: backbones, projections, encoder, proposer and decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .decoder import DecoderConfig, GraphDecoder, LayerOutputs
from .embedders import (FeatureProjector, PrecomputedTextBackend, ToyImageBackend,
                        ToyTextBackend, pad_rows)
from .encoder import EncoderConfig, FusionEncoder
from .posegraph import PoseGraph, build_adjacency
from .proposer import SimilarityProposer, select_peaks


@dataclass
class ModelConfig:
    model_dim: int = 64
    text_dim: int = 64
    image_dim: int = 64
    max_keypoints: int = 20
    patch_size: int = 8
    image_channels: int = 3
    num_heads: int = 8
    encoder_blocks: int = 3
    decoder_layers: int = 2
    ffn_dim: int | None = None
    decoder_kind: str = "graph"
    dropout: float = 0.1
    text_backend: str = "toy"  # toy | external
    text_frozen: bool = True
    text_seed: int = 0
    text_hashes: int = 4
    text_path: str | None = None
    text_normalization: str = "l2"

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder_blocks, self.model_dim, self.num_heads, self.ffn_dim,
                             self.dropout)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(self.decoder_layers, self.model_dim, self.num_heads, self.ffn_dim,
                             self.decoder_kind, self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GraphPrompt:
    """A pose graph turned into padded model inputs."""
    text_raw: torch.Tensor  # (K, C_t)
    mask: torch.Tensor  # (K,)
    adjacency: torch.Tensor  # (K, K)
    num_keypoints: int


@dataclass
class ModelOutput:
    heatmaps: torch.Tensor  # (B, K, h, w)
    proposals: torch.Tensor  # (B, K, 2)
    layers: LayerOutputs
    refined: object = field(repr=False, default=None)

    @property
    def coords(self) -> torch.Tensor:
        return self.layers.final


class TextGraphPoseModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.text_backend == "toy":
            self.text_backend = ToyTextBackend(config.text_dim, config.text_seed, config.text_hashes,
                                               config.text_frozen, config.text_normalization)
        elif config.text_backend == "external":
            if not config.text_path:
                raise ValueError("external text backend needs text_path")
            self.text_backend = PrecomputedTextBackend(config.text_path, config.text_normalization)
        else:
            raise ValueError(f"unknown text backend {config.text_backend!r}")
        self.image_backend = ToyImageBackend(config.image_channels, config.image_dim, config.patch_size)
        self.projector = FeatureProjector(config.text_dim, config.image_dim, config.model_dim)
        self.encoder = FusionEncoder(config.encoder_config())
        self.proposer = SimilarityProposer(config.model_dim)
        self.decoder = GraphDecoder(config.decoder_config())

    def prompt(self, graph: PoseGraph, texts: list[str] | None = None) -> GraphPrompt:
        raw = self.text_backend.raw(texts if texts is not None else graph.texts)
        raw, mask = pad_rows(raw, self.config.max_keypoints)
        adj = build_adjacency(graph, self.config.max_keypoints).matrix
        return GraphPrompt(raw, mask, torch.tensor(adj, dtype=torch.float32), graph.num_keypoints)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: torch.Tensor, text_raw: torch.Tensor, keypoint_mask: torch.Tensor,
                adjacency: torch.Tensor, trace: bool = False) -> ModelOutput:
        text = self.text_backend(text_raw)
        image = self.image_backend(images)
        projected = self.projector(text, image, keypoint_mask)
        refined = self.encoder(projected)
        heatmaps = self.proposer(refined)
        proposals = select_peaks(heatmaps)
        layers = self.decoder(proposals, refined, adjacency, trace=trace)
        return ModelOutput(heatmaps.scores, proposals, layers, refined)
