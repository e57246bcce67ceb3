"""Mapping fused network embeddings into the language-token space.

The token embedding matrix stays frozen and doubles as a bank of text
prototypes; a trainable projection selects a reduced prototype set, and
multi-head cross-attention lets each fused row query it.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    concat,
    load_tensors,
    matmul,
    mul,
    row_softmax,
    transpose,
)

__all__ = [
    "UNKNOWN_TOKEN_ID",
    "AlignmentConfig",
    "PrototypeBank",
    "tokenize",
    "token_to_id",
    "encode_text",
    "align_cross_attention",
    "init_alignment_params",
]

UNKNOWN_TOKEN_ID = 0

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[.\-][a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_to_id(token: str, vocab_size: int) -> int:
    """Stable word hash into [1, vocab); id 0 is the reserved unknown."""
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return 1 + int.from_bytes(digest[:8], "little") % (vocab_size - 1)


def encode_text(text: str, vocab_size: int) -> np.ndarray:
    return np.array([token_to_id(t, vocab_size) for t in tokenize(text)], dtype=np.intp)


@dataclass
class AlignmentConfig:
    heads: int = 4
    head_dim: int = 16
    prototypes: int = 32

    def __post_init__(self) -> None:
        if min(self.heads, self.head_dim, self.prototypes) < 1:
            raise ValueError("alignment dimensions must be >= 1")


class PrototypeBank:
    """Frozen token embeddings plus a trainable prototype projection."""

    def __init__(self, embedding: Tensor, projection: Tensor, vocab_size: int) -> None:
        if embedding.shape[0] != vocab_size:
            raise ValueError("embedding rows must equal vocab size")
        if projection.shape[1] != vocab_size:
            raise ValueError("projection must map from the full vocab")
        self.embedding = embedding
        self.projection = projection
        self.vocab_size = vocab_size

    @property
    def model_dim(self) -> int:
        return self.embedding.shape[1]

    @staticmethod
    def seeded_embedding(vocab_size: int, model_dim: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.normal(scale=1.0 / np.sqrt(model_dim), size=(vocab_size, model_dim))

    @staticmethod
    def load_embedding(path: str) -> np.ndarray:
        """Accept an externally supplied embedding matrix (.npy or the
        named-tensor container with an 'embedding' entry)."""
        if str(path).endswith(".npy"):
            return np.asarray(np.load(path), dtype=np.float64)
        arrays, _ = load_tensors(path)
        if "embedding" not in arrays:
            raise ValueError(f"{path} has no 'embedding' tensor")
        return arrays["embedding"]

    def prototype_rows(self) -> Tensor:
        """Reduced prototype matrix: projection @ frozen embeddings."""
        return matmul(self.projection, self.embedding)

    def encode(self, text: str) -> np.ndarray:
        return encode_text(text, self.vocab_size)


def init_alignment_params(
    cfg: AlignmentConfig, fused_dim: int, model_dim: int, vocab_size: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {
        "proto_proj": rng.normal(scale=1.0 / np.sqrt(vocab_size), size=(cfg.prototypes, vocab_size))
    }
    for h in range(cfg.heads):
        params[f"wq{h}"] = rng.normal(scale=1.0 / np.sqrt(fused_dim), size=(fused_dim, cfg.head_dim))
        params[f"wk{h}"] = rng.normal(scale=1.0 / np.sqrt(model_dim), size=(model_dim, cfg.head_dim))
        params[f"wv{h}"] = rng.normal(scale=1.0 / np.sqrt(model_dim), size=(model_dim, cfg.head_dim))
    params["w_out"] = rng.normal(
        scale=1.0 / np.sqrt(cfg.heads * cfg.head_dim), size=(cfg.heads * cfg.head_dim, model_dim)
    )
    params["w_out_b"] = np.zeros(model_dim)
    return params


def align_cross_attention(
    fused: Tensor,
    bank: PrototypeBank,
    params: dict[str, Tensor],
    cfg: AlignmentConfig,
) -> Tensor:
    """Cross-attention from fused rows (queries) onto the prototype bank
    (keys and values); heads are concatenated then mapped to the token
    embedding width."""
    prototypes = bank.prototype_rows()
    scale = Tensor(np.asarray(1.0 / np.sqrt(cfg.head_dim)))
    heads = []
    for h in range(cfg.heads):
        q = matmul(fused, params[f"wq{h}"])
        k = matmul(prototypes, params[f"wk{h}"])
        v = matmul(prototypes, params[f"wv{h}"])
        scores = mul(matmul(q, transpose(k)), scale)
        heads.append(matmul(row_softmax(scores), v))
    joined = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return add(matmul(joined, params["w_out"]), params["w_out_b"])
