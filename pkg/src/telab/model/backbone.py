"""Frozen toy decoder stack: causal self-attention alternating with MLP
blocks, pre-norm residuals, sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    concat,
    embed_lookup,
    layer_norm,
    matmul,
    mul,
    position_encoding_matrix,
    relu,
    row_softmax,
    take_slice,
    transpose,
)

__all__ = ["BackboneConfig", "init_backbone_params", "backbone_forward"]


@dataclass
class BackboneConfig:
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    causal: bool = True
    max_seq_len: int = 192
    frozen: bool = True

    def __post_init__(self) -> None:
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not self.frozen:
            raise ValueError("the backbone is frozen by contract")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, m = cfg.model_dim, cfg.mlp_hidden
    params: dict[str, np.ndarray] = {}
    for layer in range(cfg.layers):
        for tag in ("wq", "wk", "wv", "wo"):
            params[f"l{layer}_{tag}"] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, d))
        params[f"l{layer}_wo_b"] = np.zeros(d)
        params[f"l{layer}_mlp1"] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, m))
        params[f"l{layer}_mlp1_b"] = np.zeros(m)
        params[f"l{layer}_mlp2"] = rng.normal(scale=1.0 / np.sqrt(m), size=(m, d))
        params[f"l{layer}_mlp2_b"] = np.zeros(d)
    return params


def _causal_mask(t: int) -> np.ndarray:
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = -1e30
    return mask


def backbone_forward(
    token_ids: np.ndarray,
    aligned: Tensor,
    embedding: Tensor,
    params: dict[str, Tensor],
    cfg: BackboneConfig,
) -> Tensor:
    """Run prompt tokens plus aligned embeddings through the frozen stack.

    Prompt ids are looked up in the frozen embedding matrix, the aligned
    rows are appended, sinusoidal positions are added, and ``cfg.layers``
    attention+MLP blocks are applied.  With zero layers the output is just
    embeddings plus positions.
    """
    token_ids = np.asarray(token_ids, dtype=np.intp)
    seq_len = len(token_ids) + aligned.shape[0]
    if seq_len > cfg.max_seq_len:
        raise ValueError(f"sequence of {seq_len} exceeds max length {cfg.max_seq_len}")
    if aligned.shape[1] != cfg.model_dim:
        raise ValueError("aligned embedding width does not match the backbone")

    if len(token_ids):
        x = concat([embed_lookup(embedding, token_ids), aligned], axis=0)
    else:
        x = aligned
    x = add(x, Tensor(position_encoding_matrix(seq_len, cfg.model_dim)))

    mask = Tensor(_causal_mask(seq_len)) if cfg.causal else None
    scale = Tensor(np.asarray(1.0 / np.sqrt(cfg.head_dim)))
    hd = cfg.head_dim
    for layer in range(cfg.layers):
        xn = layer_norm(x)
        q = matmul(xn, params[f"l{layer}_wq"])
        k = matmul(xn, params[f"l{layer}_wk"])
        v = matmul(xn, params[f"l{layer}_wv"])
        heads = []
        for h in range(cfg.heads):
            cols = (slice(None), slice(h * hd, (h + 1) * hd))
            scores = mul(matmul(take_slice(q, cols), transpose(take_slice(k, cols))), scale)
            if mask is not None:
                scores = add(scores, mask)
            heads.append(matmul(row_softmax(scores), take_slice(v, cols)))
        attn = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        x = add(x, add(matmul(attn, params[f"l{layer}_wo"]), params[f"l{layer}_wo_b"]))

        xn = layer_norm(x)
        hidden = relu(add(matmul(xn, params[f"l{layer}_mlp1"]), params[f"l{layer}_mlp1_b"]))
        x = add(x, add(matmul(hidden, params[f"l{layer}_mlp2"]), params[f"l{layer}_mlp2_b"]))
    return x
