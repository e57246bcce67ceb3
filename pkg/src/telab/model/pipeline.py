"""End-to-end model assembly: parameters, prototype bank, and the forward
pass from (topology, demand history, constraints) to split ratios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..autodiff import ParameterSet, Tensor
from ..net import RoutingIndex, TeConfig, Topology, TunnelSet
from .alignment import AlignmentConfig, PrototypeBank, align_cross_attention, init_alignment_params
from .backbone import BackboneConfig, backbone_forward, init_backbone_params
from .encoders import (
    EncoderConfig,
    encode_history,
    encode_topology,
    fuse_reproject,
    init_encoder_params,
)
from .head import HeadConfig, head_forward, init_head_params
from .prompt import Prompt, build_prompt, traffic_stats

__all__ = ["ModelConfig", "ModelOutput", "TrafficModel", "build_parameters", "model_forward"]

FROZEN_GROUPS = ("backbone", "prototypes")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    vocab_size: int = 1024
    max_prompt_tokens: int = 96
    seed: int = 0

    @classmethod
    def small(cls, history_window: int = 4, seed: int = 0) -> "ModelConfig":
        """Compact configuration for quick experiments and tests."""
        return cls(
            encoder=EncoderConfig(
                gnn_layers=1,
                gnn_dim=4,
                rnn_dim=12,
                fused_dim=12,
                history_window=history_window,
                demand_embed_dim=8,
                rnn_hidden=10,
                fuse_hidden=16,
            ),
            alignment=AlignmentConfig(heads=2, head_dim=8, prototypes=16),
            backbone=BackboneConfig(layers=2, model_dim=32, heads=2, mlp_hidden=64),
            head=HeadConfig(hidden=32, pe_dim=8),
            vocab_size=512,
            seed=seed,
        )


def build_parameters(
    topo: Topology, tunnels: TunnelSet, config: ModelConfig
) -> tuple[ParameterSet, PrototypeBank]:
    """Seeded parameter construction; frozen groups hold the backbone and
    the prototype embedding matrix."""
    enc_cfg = config.encoder
    if enc_cfg.tunnel_feature_len is None:
        enc_cfg.tunnel_feature_len = tunnels.max_hops * enc_cfg.edge_feature_len

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_enc, rng_align, rng_head, rng_frozen = (np.random.default_rng(s) for s in seeds)

    params = ParameterSet()
    params.add_group("encoder", init_encoder_params(topo, enc_cfg, rng_enc))
    params.add_group(
        "alignment",
        init_alignment_params(
            config.alignment, enc_cfg.fused_dim, config.backbone.model_dim, config.vocab_size, rng_align
        ),
    )
    params.add_group(
        "head",
        init_head_params(config.head, config.backbone.model_dim, topo.n_nodes, tunnels.k, rng_head),
    )
    params.add_group("backbone", init_backbone_params(config.backbone, rng_frozen), frozen=True)
    params.add_group(
        "prototypes",
        {
            "embedding": PrototypeBank.seeded_embedding(
                config.vocab_size, config.backbone.model_dim, config.seed + 1
            )
        },
        frozen=True,
    )
    bank = PrototypeBank(
        embedding=params.tensor("prototypes", "embedding"),
        projection=params.tensor("alignment", "proto_proj"),
        vocab_size=config.vocab_size,
    )
    return params, bank


@dataclass
class ModelOutput:
    ratios: Tensor
    prompt: Prompt
    hidden: Tensor
    tunnel_embeddings: Tensor
    index: RoutingIndex

    def te_config(self) -> TeConfig:
        return self.index.config_from_flat(np.array(self.ratios.values))


def model_forward(
    topo: Topology,
    tunnels: TunnelSet,
    history: np.ndarray,
    constraints: Sequence[str],
    params: ParameterSet,
    bank: PrototypeBank,
    config: ModelConfig,
    index: RoutingIndex | None = None,
) -> ModelOutput:
    """Compose the full pipeline; differentiable in every trainable tensor.

    topology encoding -> history encoding -> fusion -> cross-attention
    alignment -> prompt -> frozen backbone -> shared head.
    """
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    enc = dict(params.groups["encoder"].tensors)
    _, _, tunnel_embeds = encode_topology(topo, tunnels, enc, config.encoder)
    temporal = encode_history(history, enc, config.encoder)
    fused = fuse_reproject(temporal, tunnel_embeds, enc, config.encoder)
    aligned = align_cross_attention(
        fused, bank, dict(params.groups["alignment"].tensors), config.alignment
    )
    prompt = build_prompt(
        topo,
        tunnels,
        traffic_stats(history),
        constraints,
        vocab_size=config.vocab_size,
        max_tokens=config.max_prompt_tokens,
    )
    hidden = backbone_forward(
        prompt.token_ids,
        aligned,
        bank.embedding,
        dict(params.groups["backbone"].tensors),
        config.backbone,
    )
    ratios = head_forward(
        hidden, len(prompt.token_ids), index, dict(params.groups["head"].tensors), config.head
    )
    return ModelOutput(
        ratios=ratios,
        prompt=prompt,
        hidden=hidden,
        tunnel_embeddings=tunnel_embeds,
        index=index,
    )


class TrafficModel:
    """A tunnel-splitting model bound to one topology and tunnel set."""

    def __init__(self, topo: Topology, tunnels: TunnelSet, config: ModelConfig | None = None) -> None:
        self.topo = topo
        self.tunnels = tunnels
        self.config = config or ModelConfig()
        if self.config.encoder.history_window < 1:
            raise ValueError("history window must be >= 1")
        self.index = RoutingIndex.build(topo, tunnels)
        self.params, self.bank = build_parameters(topo, tunnels, self.config)

    def forward(self, history: np.ndarray, constraints: Sequence[str] = ()) -> ModelOutput:
        return model_forward(
            self.topo,
            self.tunnels,
            history,
            constraints,
            self.params,
            self.bank,
            self.config,
            index=self.index,
        )

    def route_config(self, history: np.ndarray, constraints: Sequence[str] = ()) -> TeConfig:
        return self.forward(history, constraints).te_config()

    def frozen_checksums(self) -> dict[str, str]:
        return {name: self.params.group_checksum(name) for name in FROZEN_GROUPS}

    def trainable_parameter_count(self) -> int:
        return self.params.trainable_parameter_count()

    def save(self, path: str) -> None:
        self.params.save(path)

    def load(self, path: str) -> None:
        self.params.load(path)
