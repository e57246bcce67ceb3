"""Independent reference implementations used only by tests.

These deliberately avoid the library's fast paths: path enumeration is a
plain DFS, flow accounting is nested loops over pairs/tunnels/edges, and
the grid searches enumerate simplex lattices directly.
"""

from __future__ import annotations

import itertools

import numpy as np

from telab.net import TeConfig, Topology, TrafficMatrix, Tunnel, TunnelSet


def all_simple_paths(topo: Topology, s: str, t: str, limit: int | None = None) -> list[tuple[str, ...]]:
    """Every loopless s->t path by depth-first enumeration."""
    succ: dict[str, list[str]] = {n: [] for n in topo.nodes}
    for e in topo.edges:
        succ[e.src].append(e.dst)
    out: list[tuple[str, ...]] = []

    def visit(path: list[str]) -> None:
        node = path[-1]
        if node == t:
            out.append(tuple(path))
            return
        if limit is not None and len(path) > limit:
            return
        for nxt in succ[node]:
            if nxt not in path:
                path.append(nxt)
                visit(path)
                path.pop()

    visit([s])
    return sorted(out, key=lambda p: (len(p), p))


def nested_loop_flows(topo, tunnels, tm, cfg) -> np.ndarray:
    """Edge flows by explicit accumulation over pairs, tunnels, and hops."""
    demands = tm.values if isinstance(tm, TrafficMatrix) else np.asarray(tm)
    flows = np.zeros(topo.n_edges)
    ratios = cfg.ratios if isinstance(cfg, TeConfig) else cfg
    for (s, t), tuns in tunnels.items():
        d = demands[topo.node_index[s], topo.node_index[t]]
        for tun, r in zip(tuns, ratios[(s, t)]):
            for a, b in zip(tun.nodes[:-1], tun.nodes[1:]):
                flows[topo.edge_index[(a, b)]] += d * r
    return flows


def nested_loop_mlu(topo, tunnels, tm, cfg) -> float:
    flows = nested_loop_flows(topo, tunnels, tm, cfg)
    return float(max(flows[i] / e.capacity for i, e in enumerate(topo.edges))) if topo.n_edges else 0.0


def simplex_lattice(dim: int, resolution: float) -> np.ndarray:
    """All points of the ``resolution`` lattice on the (dim-1)-simplex."""
    steps = int(round(1.0 / resolution))
    if dim == 1:
        return np.array([[1.0]])
    points = []
    for combo in itertools.combinations_with_replacement(range(steps + 1), dim - 1):
        cuts = (0,) + combo + (steps,)
        points.append([(cuts[i + 1] - cuts[i]) / steps for i in range(dim)])
    return np.array(points)


def grid_search_mlu(
    topo: Topology,
    tunnels: TunnelSet,
    tms,
    resolution: float = 0.01,
    chunk: int = 200_000,
) -> tuple[float, dict[tuple[str, str], np.ndarray]]:
    """Exhaustive lattice search minimizing the (expected) MLU.

    Builds its own incidence bookkeeping from the tunnel node paths; the
    demand matrices in ``tms`` are averaged in the objective.
    """
    if isinstance(tms, (TrafficMatrix, np.ndarray)):
        tms = [tms]
    pairs = list(tunnels.pairs)
    grids = [simplex_lattice(len(tunnels.tunnels_for(p)), resolution) for p in pairs]
    sizes = [g.shape[0] for g in grids]
    total = int(np.prod(sizes))

    caps = np.array([e.capacity for e in topo.edges])
    weights = []  # per tm: per-pair demand
    for tm in tms:
        demands = tm.values if isinstance(tm, TrafficMatrix) else np.asarray(tm)
        weights.append(
            np.array([demands[topo.node_index[s], topo.node_index[t]] for s, t in pairs])
        )

    # per-pair incidence blocks: edges x tunnels_of_pair
    blocks = []
    for p in pairs:
        block = np.zeros((topo.n_edges, len(tunnels.tunnels_for(p))))
        for j, tun in enumerate(tunnels.tunnels_for(p)):
            for a, b in zip(tun.nodes[:-1], tun.nodes[1:]):
                block[topo.edge_index[(a, b)], j] = 1.0
        blocks.append(block)

    best = np.inf
    best_id = 0
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total))
        rem = ids.copy()
        cols = [None] * len(sizes)
        for q in range(len(sizes) - 1, -1, -1):
            cols[q] = rem % sizes[q]
            rem //= sizes[q]
        objective = np.zeros(len(ids))
        for w in weights:
            flows = np.zeros((len(ids), topo.n_edges))
            for q in range(len(pairs)):
                flows += (grids[q][cols[q]] * w[q]) @ blocks[q].T
            objective += (flows / caps).max(axis=1)
        objective /= len(weights)
        local = int(np.argmin(objective))
        if objective[local] < best:
            best = float(objective[local])
            best_id = start + local
    # reconstruct the winning configuration
    rem = best_id
    cfg = {}
    for q in range(len(sizes) - 1, -1, -1):
        cfg[pairs[q]] = grids[q][rem % sizes[q]]
        rem //= sizes[q]
    return best, cfg


def permuted_instance(topo: Topology, mapping: dict[str, str], reorder: bool = True):
    """Apply a node relabeling, optionally also shuffling the node order.

    Returns (new topology, index permutation) where permutation[i] is the
    old index of the node now at position i.
    """
    if reorder:
        new_order = sorted(topo.nodes, key=lambda n: mapping[n])
    else:
        new_order = list(topo.nodes)
    perm = np.array([topo.node_index[n] for n in new_order])
    nodes = [mapping[n] for n in new_order]
    edges = [(mapping[e.src], mapping[e.dst], e.capacity) for e in topo.edges]
    return Topology(nodes, edges), perm


def permute_matrix(values: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return values[np.ix_(perm, perm)]


def map_tunnels(tunnels: TunnelSet, mapping: dict[str, str], topo_new: Topology) -> TunnelSet:
    by_pair = {}
    for (s, t), tuns in tunnels.items():
        by_pair[(mapping[s], mapping[t])] = [
            Tunnel(tuple(mapping[n] for n in tun.nodes)) for tun in tuns
        ]
    # preserve canonical node-enumeration order of the new topology
    ordered = {}
    for s in topo_new.nodes:
        for t in topo_new.nodes:
            if (s, t) in by_pair:
                ordered[(s, t)] = by_pair[(s, t)]
    return TunnelSet(ordered, k=tunnels.k, topo=topo_new)


def map_config(cfg: TeConfig, mapping: dict[str, str]) -> TeConfig:
    return TeConfig({(mapping[s], mapping[t]): np.array(r) for (s, t), r in cfg.items()})


def dyadic_config(tunnels: TunnelSet, rng: np.random.Generator, denom: int = 64) -> TeConfig:
    """Random split ratios that are exact dyadic rationals summing to 1,
    so flow sums are order-independent in float64."""
    ratios = {}
    for pair, tuns in tunnels.items():
        k = len(tuns)
        cuts = np.sort(rng.integers(0, denom + 1, size=k - 1))
        parts = np.diff(np.concatenate([[0], cuts, [denom]])) / denom
        ratios[pair] = parts
    return TeConfig(ratios)


def random_connected_topology(
    rng: np.random.Generator, n: int, extra_edges: int = 0, dyadic: bool = False
) -> Topology:
    """Bidirected ring plus random chords; capacities in [1, 3]."""
    nodes = [f"n{i}" for i in range(n)]
    edges: dict[tuple[str, str], float] = {}

    def cap() -> float:
        if dyadic:
            return float(rng.integers(8, 33)) / 16.0
        return float(rng.uniform(1.0, 3.0))

    for i in range(n):
        edges[(nodes[i], nodes[(i + 1) % n])] = cap()
        edges[(nodes[(i + 1) % n], nodes[i])] = cap()
    for _ in range(extra_edges):
        a, b = rng.integers(0, n, size=2)
        if a != b and (nodes[a], nodes[b]) not in edges:
            edges[(nodes[a], nodes[b])] = cap()
    return Topology(nodes, [(s, d, c) for (s, d), c in edges.items()])


def random_demands(
    rng: np.random.Generator, n: int, density: float = 0.5, dyadic: bool = False
) -> TrafficMatrix:
    if dyadic:
        values = rng.integers(0, 33, size=(n, n)) / 16.0
    else:
        values = rng.uniform(0.0, 2.0, size=(n, n))
    values *= rng.random(size=(n, n)) < density
    np.fill_diagonal(values, 0.0)
    return TrafficMatrix(values)
