"""Differentiable route-splitting model built around a frozen toy decoder."""

from .alignment import (
    UNKNOWN_TOKEN_ID,
    AlignmentConfig,
    PrototypeBank,
    align_cross_attention,
    encode_text,
    token_to_id,
    tokenize,
)
from .backbone import BackboneConfig, backbone_forward, init_backbone_params
from .encoders import (
    EncoderConfig,
    encode_history,
    encode_topology,
    flatten_offdiag,
    fuse_reproject,
    node_features,
)
from .head import HeadConfig, head_forward, init_head_params
from .pipeline import ModelConfig, ModelOutput, TrafficModel, build_parameters, model_forward
from .prompt import (
    Prompt,
    PromptError,
    TrafficStats,
    build_prompt,
    burst_line,
    failure_line,
    traffic_stats,
)

__all__ = [
    "UNKNOWN_TOKEN_ID",
    "AlignmentConfig",
    "PrototypeBank",
    "align_cross_attention",
    "encode_text",
    "token_to_id",
    "tokenize",
    "BackboneConfig",
    "backbone_forward",
    "init_backbone_params",
    "EncoderConfig",
    "encode_history",
    "encode_topology",
    "flatten_offdiag",
    "fuse_reproject",
    "node_features",
    "HeadConfig",
    "head_forward",
    "init_head_params",
    "ModelConfig",
    "ModelOutput",
    "TrafficModel",
    "build_parameters",
    "model_forward",
    "Prompt",
    "PromptError",
    "TrafficStats",
    "build_prompt",
    "burst_line",
    "failure_line",
    "traffic_stats",
]
