"""Capacitated network model: topologies, tunnels, MLU accounting, failures.

Everything here is a pure function over immutable-by-convention values, so
callers may share objects freely across threads.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TopologyError",
    "RoutingError",
    "Edge",
    "Topology",
    "Tunnel",
    "TunnelSet",
    "TrafficMatrix",
    "TeConfig",
    "RoutingIndex",
    "FailureResult",
    "parse_topology",
    "load_topology",
    "select_tunnels",
    "evaluate_mlu",
    "apply_failures",
]

SIMPLEX_TOL = 1e-6


class TopologyError(ValueError):
    """Malformed or internally inconsistent network description."""


class RoutingError(ValueError):
    """Tunnels, split ratios, or demand matrices that do not fit together."""


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    capacity: float


class Topology:
    """Directed capacitated graph with a stable node ordering.

    The node tuple defines the canonical index used by demand matrices and
    by every routing structure built on top of this object.
    """

    def __init__(self, nodes: Sequence[str], edges: Iterable[Edge | tuple]) -> None:
        self.nodes: tuple[str, ...] = tuple(str(n) for n in nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise TopologyError("duplicate node id")
        if not self.nodes:
            raise TopologyError("empty node set")
        self.node_index: dict[str, int] = {n: i for i, n in enumerate(self.nodes)}

        normalized = []
        for e in edges:
            if not isinstance(e, Edge):
                e = Edge(str(e[0]), str(e[1]), float(e[2]))
            normalized.append(e)
        self.edges: tuple[Edge, ...] = tuple(normalized)

        self.edge_index: dict[tuple[str, str], int] = {}
        for i, e in enumerate(self.edges):
            if e.capacity <= 0:
                raise TopologyError(f"edge {e.src}->{e.dst} has nonpositive capacity {e.capacity}")
            if e.src not in self.node_index or e.dst not in self.node_index:
                raise TopologyError(f"edge {e.src}->{e.dst} references an unknown node")
            key = (e.src, e.dst)
            if key in self.edge_index:
                raise TopologyError(f"duplicate directed edge {e.src}->{e.dst}")
            self.edge_index[key] = i

        self.capacities: np.ndarray = np.array([e.capacity for e in self.edges], dtype=np.float64)

        out_adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        in_adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for e in self.edges:
            if e.src != e.dst:
                out_adj[e.src].append(e.dst)
                in_adj[e.dst].append(e.src)
        # Sorted neighbour lists keep every traversal deterministic.
        self.successors: dict[str, tuple[str, ...]] = {n: tuple(sorted(v)) for n, v in out_adj.items()}
        self.predecessors: dict[str, tuple[str, ...]] = {n: tuple(sorted(v)) for n, v in in_adj.items()}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def capacity(self, src: str, dst: str) -> float:
        return self.edges[self.edge_index[(src, dst)]].capacity

    def __repr__(self) -> str:  # pragma: no cover
        return f"Topology({self.n_nodes} nodes, {self.n_edges} edges)"


def parse_topology(
    source: bytes | str,
    fmt: str = "json",
    default_capacity: float = 1.0,
) -> Topology:
    """Parse a topology from JSON or a minimal GML subset.

    Undirected inputs are expanded into two directed edges of equal capacity;
    edges without a capacity attribute get ``default_capacity``.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        text = source
    if fmt == "json":
        return _parse_topology_json(text, default_capacity)
    if fmt in ("gml", "gml-subset"):
        return _parse_topology_gml(text, default_capacity)
    raise ValueError(f"unknown topology format {fmt!r}")


def load_topology(path: str, default_capacity: float = 1.0) -> Topology:
    """Load a topology file, inferring the format from the extension."""
    fmt = "gml" if str(path).lower().endswith(".gml") else "json"
    with open(path, "rb") as fh:
        return parse_topology(fh.read(), fmt=fmt, default_capacity=default_capacity)


def _expand_edges(raw: list[tuple[str, str, float]], directed: bool) -> list[tuple[str, str, float]]:
    if directed:
        return raw
    out = []
    for src, dst, cap in raw:
        out.append((src, dst, cap))
        out.append((dst, src, cap))
    return out


def _parse_topology_json(text: str, default_capacity: float) -> Topology:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"malformed JSON topology: {exc}") from exc
    if not isinstance(obj, dict) or "nodes" not in obj or "edges" not in obj:
        raise TopologyError("topology JSON must contain 'nodes' and 'edges'")
    directed = bool(obj.get("directed", True))
    raw = []
    for rec in obj["edges"]:
        cap = float(rec.get("capacity", default_capacity))
        raw.append((str(rec["src"]), str(rec["dst"]), cap))
    return Topology(obj["nodes"], _expand_edges(raw, directed))


def _gml_tokens(text: str):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise TopologyError("unterminated GML string")
            yield text[i + 1 : j]
            i = j + 1
            continue
        if c in "[]":
            yield c
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in '[]"':
            j += 1
        yield text[i:j]
        i = j


def _gml_value(tok):
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        return tok


def _gml_block(tokens) -> dict[str, list]:
    """Read key/value pairs until the closing bracket; repeated keys stack."""
    block: dict[str, list] = {}
    for tok in tokens:
        if tok == "]":
            return block
        key = tok
        try:
            val = next(tokens)
        except StopIteration:
            raise TopologyError(f"GML key {key!r} has no value")
        if val == "[":
            block.setdefault(key, []).append(_gml_block(tokens))
        else:
            block.setdefault(key, []).append(_gml_value(val))
    return block


def _parse_topology_gml(text: str, default_capacity: float) -> Topology:
    tokens = _gml_tokens(text)
    root = _gml_block(tokens)
    graphs = root.get("graph")
    if not graphs or not isinstance(graphs[0], dict):
        raise TopologyError("GML input has no graph block")
    g = graphs[0]
    directed = bool(g.get("directed", [0])[0])

    names: dict[object, str] = {}
    labels = []
    for rec in g.get("node", []):
        if "id" not in rec:
            raise TopologyError("GML node without id")
        nid = rec["id"][0]
        label = rec.get("label", [None])[0]
        names[nid] = str(label) if label is not None else str(nid)
        labels.append(names[nid])
    if len(set(labels)) != len(labels):
        # Fall back to numeric ids when labels collide.
        names = {nid: str(nid) for nid in names}
        labels = [names[rec["id"][0]] for rec in g.get("node", [])]

    raw = []
    for rec in g.get("edge", []):
        try:
            src_id = rec["source"][0]
            dst_id = rec["target"][0]
        except KeyError as exc:
            raise TopologyError("GML edge without source/target") from exc
        if src_id not in names or dst_id not in names:
            raise TopologyError(f"GML edge references unknown node {src_id}->{dst_id}")
        cap = float(rec.get("capacity", [default_capacity])[0])
        raw.append((names[src_id], names[dst_id], cap))
    return Topology(labels, _expand_edges(raw, directed))


@dataclass(frozen=True)
class Tunnel:
    """A simple directed path identified by its node sequence."""

    nodes: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) < 2:
            raise RoutingError("tunnel needs at least two nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise RoutingError(f"tunnel revisits a node: {self.nodes}")

    @property
    def od(self) -> tuple[str, str]:
        return (self.nodes[0], self.nodes[-1])

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    def edge_keys(self) -> tuple[tuple[str, str], ...]:
        return tuple(zip(self.nodes[:-1], self.nodes[1:]))


class TunnelSet:
    """Ordered tunnels per OD pair, at most ``k`` per pair.

    Pair iteration order is fixed at construction time (node-enumeration
    order when produced by :func:`select_tunnels`) and is the canonical
    order used by every downstream routing structure.
    """

    def __init__(
        self,
        by_pair: Mapping[tuple[str, str], Sequence[Tunnel]],
        k: int,
        topo: Topology | None = None,
    ) -> None:
        if k < 1:
            raise RoutingError("tunnel budget k must be >= 1")
        self.k = int(k)
        self._by_pair: dict[tuple[str, str], tuple[Tunnel, ...]] = {}
        for pair, tunnels in by_pair.items():
            pair = (str(pair[0]), str(pair[1]))
            tunnels = tuple(tunnels)
            if not tunnels:
                continue
            if len(tunnels) > self.k:
                raise RoutingError(f"pair {pair} exceeds tunnel budget {self.k}")
            for t in tunnels:
                if t.od != pair:
                    raise RoutingError(f"tunnel {t.nodes} does not connect {pair}")
                if topo is not None:
                    for ek in t.edge_keys():
                        if ek not in topo.edge_index:
                            raise RoutingError(f"tunnel {t.nodes} uses missing edge {ek}")
            self._by_pair[pair] = tunnels

    @property
    def pairs(self) -> tuple[tuple[str, str], ...]:
        return tuple(self._by_pair)

    def tunnels_for(self, pair: tuple[str, str]) -> tuple[Tunnel, ...]:
        return self._by_pair[pair]

    def items(self):
        return self._by_pair.items()

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._by_pair

    def __len__(self) -> int:
        return len(self._by_pair)

    @property
    def total_tunnels(self) -> int:
        return sum(len(v) for v in self._by_pair.values())

    @property
    def max_hops(self) -> int:
        return max((t.hops for v in self._by_pair.values() for t in v), default=0)


def _lex_shortest(
    topo: Topology,
    s: str,
    t: str,
    banned_nodes: frozenset = frozenset(),
    banned_edges: frozenset = frozenset(),
) -> tuple[str, ...] | None:
    """Min-hop path s->t, lexicographically smallest node sequence on ties."""
    if s in banned_nodes or t in banned_nodes:
        return None
    # Reverse BFS from t gives hop distances; a greedy smallest-neighbour walk
    # from s along strictly decreasing distances is then the lex-min path.
    dist = {t: 0}
    frontier = [t]
    while frontier:
        nxt = []
        for v in frontier:
            for u in topo.predecessors[v]:
                if u in banned_nodes or (u, v) in banned_edges or u in dist:
                    continue
                dist[u] = dist[v] + 1
                nxt.append(u)
        frontier = nxt
    if s not in dist:
        return None
    path = [s]
    cur = s
    while cur != t:
        step = dist[cur] - 1
        for n in topo.successors[cur]:  # sorted, so first hit is lex-min
            if n in banned_nodes or (cur, n) in banned_edges:
                continue
            if dist.get(n, -1) == step:
                path.append(n)
                cur = n
                break
        else:  # pragma: no cover - dist guarantees a successor exists
            return None
    return tuple(path)


def _k_shortest_paths(topo: Topology, s: str, t: str, k: int) -> list[tuple[str, ...]]:
    """Yen-style loopless k-shortest enumeration under the hop-count metric."""
    first = _lex_shortest(topo, s, t)
    if first is None:
        return []
    accepted = [first]
    candidates: list[tuple[int, tuple[str, ...]]] = []
    seen = {first}
    while len(accepted) < k:
        base = accepted[-1]
        for i in range(len(base) - 1):
            root = base[:i + 1]
            banned_edges = frozenset(
                (p[i], p[i + 1]) for p in accepted if len(p) > i + 1 and p[: i + 1] == root
            )
            banned_nodes = frozenset(root[:-1])
            spur = _lex_shortest(topo, root[-1], t, banned_nodes, banned_edges)
            if spur is None:
                continue
            path = root[:-1] + spur
            if path not in seen:
                seen.add(path)
                heapq.heappush(candidates, (len(path) - 1, path))
        if not candidates:
            break
        _, best = heapq.heappop(candidates)
        accepted.append(best)
    accepted.sort(key=lambda p: (len(p), p))
    return accepted


def select_tunnels(topo: Topology, k: int) -> TunnelSet:
    """Pick up to ``k`` shortest loopless paths per ordered OD pair.

    Ordering is (hop count, lexicographic node sequence), so two calls on
    equal inputs always produce identical tunnel sets.  Pairs with no path
    are simply absent from the result.
    """
    if k < 1:
        raise RoutingError("k must be >= 1")
    by_pair: dict[tuple[str, str], list[Tunnel]] = {}
    for s in topo.nodes:
        for t in topo.nodes:
            if s == t:
                continue
            paths = _k_shortest_paths(topo, s, t, k)
            if paths:
                by_pair[(s, t)] = [Tunnel(p) for p in paths]
    return TunnelSet(by_pair, k=k, topo=topo)


@dataclass
class TrafficMatrix:
    """Per-interval demand volume for every ordered node pair."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise RoutingError(f"demand matrix must be square, got {v.shape}")
        if np.any(v < 0):
            raise RoutingError("negative demand")
        if np.any(np.diagonal(v) != 0):
            raise RoutingError("nonzero diagonal demand")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def scaled(self, factor: float) -> "TrafficMatrix":
        return TrafficMatrix(self.values * factor)


class TeConfig:
    """Per-OD-pair split ratios aligned with a tunnel set's pair order."""

    def __init__(
        self,
        ratios: Mapping[tuple[str, str], Sequence[float] | np.ndarray],
        validate: bool = True,
    ) -> None:
        self.ratios: dict[tuple[str, str], np.ndarray] = {
            (str(p[0]), str(p[1])): np.asarray(r, dtype=np.float64) for p, r in ratios.items()
        }
        if validate:
            for pair, r in self.ratios.items():
                if r.ndim != 1 or r.size == 0:
                    raise RoutingError(f"pair {pair} has malformed ratios")
                if np.any(r < -1e-9):
                    raise RoutingError(f"pair {pair} has negative split ratio")
                if abs(float(r.sum()) - 1.0) > SIMPLEX_TOL:
                    raise RoutingError(f"pair {pair} ratios sum to {r.sum()}, not 1")

    @classmethod
    def uniform(cls, tunnels: TunnelSet) -> "TeConfig":
        return cls({p: np.full(len(ts), 1.0 / len(ts)) for p, ts in tunnels.items()})

    def pair_ratios(self, pair: tuple[str, str]) -> np.ndarray:
        return self.ratios[pair]

    def items(self):
        return self.ratios.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TeConfig):
            return NotImplemented
        if set(self.ratios) != set(other.ratios):
            return False
        return all(np.array_equal(self.ratios[p], other.ratios[p]) for p in self.ratios)

    def to_json_dict(self) -> dict[str, list[float]]:
        return {f"{s}->{t}": [float(x) for x in r] for (s, t), r in self.ratios.items()}

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Sequence[float]]) -> "TeConfig":
        ratios = {}
        for key, vals in obj.items():
            s, _, t = key.partition("->")
            ratios[(s, t)] = np.asarray(vals, dtype=np.float64)
        return cls(ratios)


class RoutingIndex:
    """Flat view of (topology, tunnels) used by the fast MLU paths.

    Tunnels get global ids in pair-enumeration order; ``incidence`` is the
    dense edge x tunnel 0/1 matrix, and the padded layout groups each pair's
    ratios into one row of a (pairs x k_max) matrix.
    """

    def __init__(self, topo: Topology, tunnels: TunnelSet) -> None:
        self.topo = topo
        self.tunnels = tunnels
        self.pairs: tuple[tuple[str, str], ...] = tunnels.pairs
        self.src_idx = np.array([topo.node_index[s] for s, _ in self.pairs], dtype=np.intp)
        self.dst_idx = np.array([topo.node_index[t] for _, t in self.pairs], dtype=np.intp)
        counts = np.array([len(tunnels.tunnels_for(p)) for p in self.pairs], dtype=np.intp)
        self.counts = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.total = int(self.offsets[-1])
        self.pair_of_tunnel = np.repeat(np.arange(len(self.pairs), dtype=np.intp), counts)

        inc = np.zeros((topo.n_edges, self.total), dtype=np.float64)
        g = 0
        for pair in self.pairs:
            for tun in tunnels.tunnels_for(pair):
                for ek in tun.edge_keys():
                    inc[topo.edge_index[ek], g] = 1.0
                g += 1
        self.incidence = inc
        self.caps = topo.capacities

        self.k_max = int(counts.max()) if len(counts) else 0
        self.pad_rows = self.pair_of_tunnel
        self.pad_cols = np.concatenate([np.arange(c, dtype=np.intp) for c in counts]) if self.total else np.zeros(0, dtype=np.intp)
        self.mask = np.zeros((len(self.pairs), self.k_max), dtype=bool)
        self.mask[self.pad_rows, self.pad_cols] = True

    @classmethod
    def build(cls, topo: Topology, tunnels: TunnelSet) -> "RoutingIndex":
        return cls(topo, tunnels)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def demands(self, tm: TrafficMatrix | np.ndarray) -> np.ndarray:
        values = tm.values if isinstance(tm, TrafficMatrix) else np.asarray(tm)
        if values.shape != (self.topo.n_nodes, self.topo.n_nodes):
            raise RoutingError(
                f"demand matrix shape {values.shape} does not match {self.topo.n_nodes} nodes"
            )
        return values[self.src_idx, self.dst_idx]

    def flat_from_config(self, cfg: TeConfig | Mapping) -> np.ndarray:
        ratios = cfg.ratios if isinstance(cfg, TeConfig) else cfg
        if set(ratios) != set(self.pairs):
            raise RoutingError("configuration pairs do not match the tunnel set")
        flat = np.empty(self.total, dtype=np.float64)
        for q, pair in enumerate(self.pairs):
            r = np.asarray(ratios[pair], dtype=np.float64)
            if r.shape != (self.counts[q],):
                raise RoutingError(
                    f"pair {pair} has {r.size} ratios for {self.counts[q]} tunnels"
                )
            flat[self.offsets[q] : self.offsets[q + 1]] = r
        return flat

    def config_from_flat(self, flat: np.ndarray, validate: bool = True) -> TeConfig:
        ratios = {
            pair: np.array(flat[self.offsets[q] : self.offsets[q + 1]])
            for q, pair in enumerate(self.pairs)
        }
        return TeConfig(ratios, validate=validate)

    def padded_from_flat(self, flat: np.ndarray) -> np.ndarray:
        padded = np.zeros((self.n_pairs, self.k_max), dtype=np.float64)
        padded[self.pad_rows, self.pad_cols] = flat
        return padded

    def flat_from_padded(self, padded: np.ndarray) -> np.ndarray:
        return padded[self.pad_rows, self.pad_cols]

    def uniform_flat(self) -> np.ndarray:
        return 1.0 / self.counts[self.pair_of_tunnel].astype(np.float64)

    def flows_from_flat(self, flat: np.ndarray, demands: np.ndarray) -> np.ndarray:
        return self.incidence @ (flat * demands[self.pair_of_tunnel])


def evaluate_mlu(
    topo: Topology,
    tunnels: TunnelSet,
    tm: TrafficMatrix | np.ndarray,
    cfg: TeConfig | Mapping,
    index: RoutingIndex | None = None,
) -> tuple[float, np.ndarray]:
    """Maximum link utilization and the per-edge flow vector.

    Flow on an edge is the sum over OD pairs and their tunnels containing
    that edge of demand times split ratio; MLU is the largest flow/capacity
    ratio.  Zero traffic yields an MLU of exactly 0.
    """
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    flat = index.flat_from_config(cfg)
    flows = index.flows_from_flat(flat, index.demands(tm))
    if index.topo.n_edges == 0:
        return 0.0, flows
    mlu = float(np.max(flows / index.caps))
    return mlu, flows


@dataclass
class FailureResult:
    """Surviving tunnels and renormalized splits after link failures."""

    tunnels: TunnelSet
    config: TeConfig
    disconnected: tuple[tuple[str, str], ...]


def apply_failures(
    topo: Topology,
    tunnels: TunnelSet,
    cfg: TeConfig,
    failed_edges: Iterable[tuple[str, str]],
) -> FailureResult:
    """Drop tunnels crossing failed links and redistribute their mass.

    Mass moves to surviving tunnels proportionally to their current ratios,
    or uniformly when all surviving ratios are zero.  Pairs left with no
    tunnel are reported in ``disconnected`` rather than raising.  Applying
    the same failure set twice is an exact no-op.
    """
    failed = {(str(a), str(b)) for a, b in failed_edges}
    for ek in failed:
        if ek not in topo.edge_index:
            raise TopologyError(f"failed edge {ek} is not in the topology")

    surviving: dict[tuple[str, str], tuple[Tunnel, ...]] = {}
    ratios: dict[tuple[str, str], np.ndarray] = {}
    disconnected: list[tuple[str, str]] = []
    for pair, tuns in tunnels.items():
        keep = [i for i, t in enumerate(tuns) if not any(ek in failed for ek in t.edge_keys())]
        if not keep:
            disconnected.append(pair)
            continue
        kept = tuple(tuns[i] for i in keep)
        r = cfg.pair_ratios(pair)
        if len(keep) == len(tuns):
            new_r = np.array(r)
        else:
            survivors = r[keep]
            mass = float(survivors.sum())
            if mass > 0.0:
                new_r = survivors / mass
            else:
                new_r = np.full(len(keep), 1.0 / len(keep))
        surviving[pair] = kept
        ratios[pair] = new_r

    return FailureResult(
        tunnels=TunnelSet(surviving, k=tunnels.k, topo=topo),
        config=TeConfig(ratios),
        disconnected=tuple(disconnected),
    )
