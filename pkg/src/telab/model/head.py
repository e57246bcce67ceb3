"""Shared per-router output head.

One MLP serves every origin router; the router's identity enters only
through its sinusoidal position code, so trainable size grows with the
node count, not its square.  Destination blocks of the output row are
soft-maxed per OD pair into split ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    position_encoding_matrix,
    reduce_sum,
    reshape,
    row_softmax,
    take_slice,
    tanh_,
)
from ..net import RoutingIndex

__all__ = ["HeadConfig", "init_head_params", "head_forward"]


@dataclass
class HeadConfig:
    hidden: int = 64
    pe_dim: int = 16

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.pe_dim < 2 or self.pe_dim % 2:
            raise ValueError("pe_dim must be a positive even integer")


def init_head_params(
    cfg: HeadConfig, model_dim: int, n_nodes: int, tunnel_budget: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    in_dim = model_dim + cfg.pe_dim
    out_dim = n_nodes * tunnel_budget
    return {
        "w1": rng.normal(scale=1.0 / np.sqrt(in_dim), size=(in_dim, cfg.hidden)),
        "w1_b": np.zeros(cfg.hidden),
        "w2": rng.normal(scale=1.0 / np.sqrt(cfg.hidden), size=(cfg.hidden, out_dim)),
        "w2_b": np.zeros(out_dim),
    }


def head_forward(
    hidden: Tensor,
    prompt_len: int,
    index: RoutingIndex,
    params: dict[str, Tensor],
    cfg: HeadConfig,
) -> Tensor:
    """Split ratios for every routed pair, flattened in tunnel order.

    The backbone output is pooled (mean over non-prompt positions), paired
    with each origin's position code, pushed through the shared MLP, and
    each destination block is soft-maxed over that pair's tunnel count.
    """
    n = index.topo.n_nodes
    k = index.tunnels.k
    seq_len = hidden.shape[0]
    span = seq_len - prompt_len
    if span < 1:
        raise ValueError("no non-prompt positions to pool")

    pooled = take_slice(hidden, (slice(prompt_len, seq_len), slice(None)))
    summary = mul(reshape(reduce_sum(pooled, axis=0), (1, hidden.shape[1])), Tensor(np.asarray(1.0 / span)))
    repeated = matmul(Tensor(np.ones((n, 1))), summary)
    codes = Tensor(position_encoding_matrix(n, cfg.pe_dim))
    head_in = concat([repeated, codes], axis=1)

    z = tanh_(add(matmul(head_in, params["w1"]), params["w1_b"]))
    logits = add(matmul(z, params["w2"]), params["w2_b"])

    groups = []
    for q, (s, t) in enumerate(index.pairs):
        row = index.topo.node_index[s]
        col = index.topo.node_index[t] * k
        block = take_slice(logits, (slice(row, row + 1), slice(col, col + int(index.counts[q]))))
        groups.append(row_softmax(block))
    flat = groups[0] if len(groups) == 1 else concat(groups, axis=1)
    return reshape(flat, (index.total,))
