"""Structure-aware encoders: topology GNN, demand-history RNN, and the
topology-conditioned fusion of the two streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    concat,
    embed_lookup,
    matmul,
    mul,
    reduce_sum,
    reshape,
    take_slice,
    tanh_,
)
from ..net import Topology, TunnelSet

__all__ = [
    "EncoderConfig",
    "node_features",
    "init_encoder_params",
    "encode_topology",
    "encode_history",
    "fuse_reproject",
]


@dataclass
class EncoderConfig:
    """Dimensions of the spatial/temporal encoders.

    ``tunnel_feature_len`` is resolved per topology: max tunnel hop count
    times the edge-feature width, recorded when parameters are built.
    """

    gnn_layers: int = 2
    gnn_dim: int = 8
    rnn_dim: int = 32          # per-step temporal embedding width (D)
    fused_dim: int = 32        # fused width (C)
    history_window: int = 12   # S
    demand_embed_dim: int = 16
    rnn_hidden: int = 24
    fuse_hidden: int = 48
    tunnel_feature_len: int | None = None

    def __post_init__(self) -> None:
        for name in ("gnn_layers", "gnn_dim", "rnn_dim", "fused_dim", "history_window",
                     "demand_embed_dim", "rnn_hidden", "fuse_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def edge_feature_len(self) -> int:
        return 2 * self.gnn_dim + 1


def node_features(topo: Topology) -> np.ndarray:
    """Label-free per-node features: in/out degree and incident capacity,
    normalized by network-wide means so scales stay tame."""
    n = topo.n_nodes
    in_deg = np.zeros(n)
    out_deg = np.zeros(n)
    cap_sum = np.zeros(n)
    for e in topo.edges:
        si, di = topo.node_index[e.src], topo.node_index[e.dst]
        out_deg[si] += 1.0
        in_deg[di] += 1.0
        cap_sum[si] += e.capacity
        cap_sum[di] += e.capacity
    mean_deg = max(topo.n_edges / n, 1e-12)
    mean_cap = max(float(topo.capacities.mean()) if topo.n_edges else 0.0, 1e-12)
    return np.stack(
        [in_deg / mean_deg, out_deg / mean_deg, cap_sum / (2.0 * mean_deg * mean_cap), np.ones(n)],
        axis=1,
    )


N_NODE_FEATURES = 4


def init_encoder_params(
    topo: Topology, cfg: EncoderConfig, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    g = cfg.gnn_dim
    params: dict[str, np.ndarray] = {}

    def dense(name: str, fan_in: int, fan_out: int) -> None:
        params[name] = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"{name}_b"] = np.zeros(fan_out)

    in_dim = N_NODE_FEATURES
    for layer in range(cfg.gnn_layers):
        for tag in ("self", "in", "out"):
            params[f"gnn{layer}_{tag}"] = rng.normal(
                scale=1.0 / np.sqrt(3 * in_dim), size=(in_dim, g)
            )
        params[f"gnn{layer}_b"] = np.zeros(g)
        in_dim = g

    n_pairs = topo.n_nodes * (topo.n_nodes - 1)
    dense("rnn_embed", n_pairs, cfg.demand_embed_dim)
    r = cfg.rnn_hidden
    for direction in ("fwd", "bwd"):
        dense(f"rnn_{direction}_x", cfg.demand_embed_dim, r)
        params[f"rnn_{direction}_h"] = rng.normal(scale=1.0 / np.sqrt(r), size=(r, r))
    dense("rnn_out", 2 * r, cfg.rnn_dim)

    feature_len = cfg.tunnel_feature_len
    if feature_len is None:
        raise ValueError("tunnel_feature_len must be resolved before init")
    dense("fuse_w1", feature_len, cfg.fuse_hidden)
    dense("fuse_w2", cfg.fuse_hidden, cfg.rnn_dim * cfg.fused_dim)
    return params


def _adjacency_operators(topo: Topology) -> tuple[np.ndarray, np.ndarray]:
    n = topo.n_nodes
    m_in = np.zeros((n, n))
    m_out = np.zeros((n, n))
    for e in topo.edges:
        si, di = topo.node_index[e.src], topo.node_index[e.dst]
        m_in[di, si] = 1.0
        m_out[si, di] = 1.0
    return m_in, m_out


def encode_topology(
    topo: Topology,
    tunnels: TunnelSet,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Message-passing node features, per-edge features, tunnel embeddings.

    An edge feature is [h_src; h_dst; capacity]; a tunnel embedding is the
    concatenation of its traversed edge features, zero-padded on the right
    to the longest tunnel.  Returned tunnel rows follow the tunnel set's
    pair-enumeration order.
    """
    m_in_np, m_out_np = _adjacency_operators(topo)
    m_in, m_out = Tensor(m_in_np), Tensor(m_out_np)
    h = Tensor(node_features(topo))
    for layer in range(cfg.gnn_layers):
        mixed = add(
            add(
                matmul(h, params[f"gnn{layer}_self"]),
                matmul(matmul(m_in, h), params[f"gnn{layer}_in"]),
            ),
            matmul(matmul(m_out, h), params[f"gnn{layer}_out"]),
        )
        h = tanh_(add(mixed, params[f"gnn{layer}_b"]))

    src_ids = np.array([topo.node_index[e.src] for e in topo.edges], dtype=np.intp)
    dst_ids = np.array([topo.node_index[e.dst] for e in topo.edges], dtype=np.intp)
    cap_col = Tensor((topo.capacities / topo.capacities.mean()).reshape(-1, 1))
    edge_feats = concat(
        [embed_lookup(h, src_ids), embed_lookup(h, dst_ids), cap_col], axis=1
    )

    feat_len = cfg.edge_feature_len
    max_hops = tunnels.max_hops
    total_len = max_hops * feat_len

    # Group tunnels by hop count so every lookup is one rectangular gather.
    order: list[tuple[int, tuple[int, ...]]] = []
    for pair in tunnels.pairs:
        for tun in tunnels.tunnels_for(pair):
            order.append((tun.hops, tuple(topo.edge_index[ek] for ek in tun.edge_keys())))
    by_hops: dict[int, list[int]] = {}
    for g_id, (hops, _) in enumerate(order):
        by_hops.setdefault(hops, []).append(g_id)

    blocks: list[Tensor] = []
    stack_pos = np.empty(len(order), dtype=np.intp)
    cursor = 0
    for hops in sorted(by_hops):
        members = by_hops[hops]
        ids = np.array([order[g][1] for g in members], dtype=np.intp)  # (m, hops)
        gathered = reshape(embed_lookup(edge_feats, ids), (len(members), hops * feat_len))
        pad = total_len - hops * feat_len
        if pad:
            gathered = concat([gathered, Tensor(np.zeros((len(members), pad)))], axis=1)
        blocks.append(gathered)
        for g_id in members:
            stack_pos[g_id] = cursor
            cursor += 1
    stacked = blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)
    tunnel_embeds = embed_lookup(stacked, stack_pos)
    return h, edge_feats, tunnel_embeds


def flatten_offdiag(history: np.ndarray) -> np.ndarray:
    """Row-major off-diagonal entries of each matrix in the stack."""
    s, n, _ = history.shape
    mask = ~np.eye(n, dtype=bool)
    return history.reshape(s, n * n)[:, mask.reshape(-1)]


def encode_history(
    history: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
) -> Tensor:
    """Bidirectional recurrent encoding of a demand-history window.

    Each matrix's off-diagonal entries are normalized by the window mean
    (the best split is invariant to demand scale), linearly embedded, and
    run through forward and backward recurrences whose states are fused
    into one row per step.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3:
        raise ValueError(f"history must be (S, n, n), got {history.shape}")
    s = history.shape[0]
    x = flatten_offdiag(history)
    x = x / (x.mean() + 1e-8)
    embedded = add(matmul(Tensor(x), params["rnn_embed"]), params["rnn_embed_b"])

    def run(direction: str, step_order: range) -> dict[int, Tensor]:
        w_x = params[f"rnn_{direction}_x"]
        w_h = params[f"rnn_{direction}_h"]
        b = params[f"rnn_{direction}_x_b"]
        states: dict[int, Tensor] = {}
        prev: Tensor | None = None
        for t in step_order:
            row = take_slice(embedded, (slice(t, t + 1), slice(None)))
            z = add(matmul(row, w_x), b)
            if prev is not None:
                z = add(z, matmul(prev, w_h))
            prev = tanh_(z)
            states[t] = prev
        return states

    fwd = run("fwd", range(s))
    bwd = run("bwd", range(s - 1, -1, -1))
    rows = [concat([fwd[t], bwd[t]], axis=1) for t in range(s)]
    joined = rows[0] if s == 1 else concat(rows, axis=0)
    return add(matmul(joined, params["rnn_out"]), params["rnn_out_b"])


def fuse_reproject(
    temporal: Tensor,
    tunnel_embeds: Tensor,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
) -> Tensor:
    """Project temporal embeddings through a matrix conditioned on topology.

    The projection W is produced by an MLP over the tunnel-set summary
    (mean of tunnel embeddings, so the conditioning is independent of
    tunnel enumeration order) and reshaped to (D, C); the result is the
    matrix product temporal @ W.
    """
    p = tunnel_embeds.shape[0]
    pooled = reshape(reduce_sum(tunnel_embeds, axis=0), (1, tunnel_embeds.shape[1]))
    pooled = mul(pooled, Tensor(np.asarray(1.0 / p)))
    hidden = tanh_(add(matmul(pooled, params["fuse_w1"]), params["fuse_w1_b"]))
    w_flat = add(matmul(hidden, params["fuse_w2"]), params["fuse_w2_b"])
    w = reshape(w_flat, (cfg.rnn_dim, cfg.fused_dim))
    return matmul(temporal, w)
