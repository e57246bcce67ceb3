"""Ground-truth MLU solvers and finite-automaton simulation.

The solver treats iterative TE optimization as a state machine over split
configurations: each transition is a projected subgradient step, and the
machine halts when the best-seen MLU stops improving.  A log-depth prefix
composition of transition tables provides the parallel simulation path for
plain finite automata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .net import RoutingIndex, TeConfig, TrafficMatrix, TunnelSet, Topology

__all__ = [
    "SolverSettings",
    "AutomatonState",
    "SolveResult",
    "FiniteAutomaton",
    "project_simplex",
    "mlu_subgradient",
    "automaton_step",
    "solve_te",
    "solve_expected",
    "sequential_simulate",
    "prefix_compose",
    "parallel_simulate",
    "predict_wma",
]


@dataclass
class SolverSettings:
    """Projected-subgradient solver knobs.

    ``step_size`` is the base of a 1/sqrt(t) schedule; ``None`` picks
    0.1 divided by the largest possible subgradient entry (max demand over
    min capacity), so the first step moves each ratio by at most ~0.1.
    Halting triggers when the best MLU has not improved by at least
    ``halt_threshold`` within the last ``patience`` steps.
    """

    step_size: float | None = None
    halt_threshold: float = 1e-5
    max_steps: int = 20000
    averaging: bool = False
    patience: int = 50

    def __post_init__(self) -> None:
        # zero is allowed so a single transition can be exercised as a no-op
        if self.step_size is not None and self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.halt_threshold <= 0:
            raise ValueError("halt_threshold must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class AutomatonState:
    """One point of the optimization trajectory: config, step count, MLU."""

    config: TeConfig
    step: int
    mlu: float


@dataclass
class SolveResult:
    config: TeConfig
    mlu: float
    steps: int
    converged: bool
    trace: list[tuple[int, float]] = field(default_factory=list)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) = 1} by sort-and-threshold."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty 1-D vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, v.size + 1)
    cond = u - (css - 1.0) / k > 0
    rho = int(np.nonzero(cond)[0][-1])
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _project_rows(padded: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection on a padded matrix; masked slots stay 0."""
    work = np.where(mask, padded, -np.inf)
    u = -np.sort(-work, axis=1)
    counts = mask.sum(axis=1)
    safe = np.where(np.isfinite(u), u, 0.0)
    css = np.cumsum(safe, axis=1)
    k = np.arange(1, padded.shape[1] + 1)[None, :]
    cond = (u - (css - 1.0) / k > 0) & (k <= counts[:, None])
    rho = np.where(cond, k, 0).max(axis=1)  # >= 1 whenever the row is nonempty
    rho = np.maximum(rho, 1)
    theta = (css[np.arange(padded.shape[0]), rho - 1] - 1.0) / rho
    out = np.maximum(padded - theta[:, None], 0.0)
    out[~mask] = 0.0
    return out


def _max_util_edge(index: RoutingIndex, flat: np.ndarray, demands: np.ndarray) -> tuple[int, float, np.ndarray]:
    flows = index.flows_from_flat(flat, demands)
    util = flows / index.caps
    e_star = int(np.argmax(util))  # ties: lowest edge index
    return e_star, float(util[e_star]), flows


def _subgradient_flat(index: RoutingIndex, e_star: int, demands: np.ndarray) -> np.ndarray:
    # d(MLU)/d(r_p) = demand / capacity for tunnels crossing the argmax edge.
    return index.incidence[e_star] * demands[index.pair_of_tunnel] / index.caps[e_star]


def _auto_step_size(index: RoutingIndex, demand_sets: Sequence[np.ndarray]) -> float:
    dmax = max((float(d.max()) for d in demand_sets if d.size), default=0.0)
    if dmax <= 0.0:
        return 0.1
    return 0.1 * float(index.caps.min()) / dmax


def mlu_subgradient(
    topo: Topology,
    tunnels: TunnelSet,
    tm: TrafficMatrix | np.ndarray,
    cfg: TeConfig,
    index: RoutingIndex | None = None,
) -> dict[tuple[str, str], np.ndarray]:
    """Subgradient of the MLU at ``cfg``: per pair, demand/capacity on
    tunnels crossing the most-utilized edge (ties broken by edge index)."""
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    demands = index.demands(tm)
    flat = index.flat_from_config(cfg)
    e_star, _, _ = _max_util_edge(index, flat, demands)
    g = _subgradient_flat(index, e_star, demands)
    return {
        pair: g[index.offsets[q] : index.offsets[q + 1]]
        for q, pair in enumerate(index.pairs)
    }


def automaton_step(
    topo: Topology,
    tunnels: TunnelSet,
    state: AutomatonState,
    tm: TrafficMatrix | np.ndarray,
    settings: SolverSettings,
    index: RoutingIndex | None = None,
) -> AutomatonState:
    """One transition: project (config - step_size * subgradient) per pair."""
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    demands = index.demands(tm)
    flat = index.flat_from_config(state.config)
    eta = settings.step_size if settings.step_size is not None else _auto_step_size(index, [demands])
    e_star, _, _ = _max_util_edge(index, flat, demands)
    g = _subgradient_flat(index, e_star, demands)
    padded = index.padded_from_flat(flat - eta * g)
    new_flat = index.flat_from_padded(_project_rows(padded, index.mask))
    _, new_mlu, _ = _max_util_edge(index, new_flat, demands)
    return AutomatonState(
        config=index.config_from_flat(new_flat),
        step=state.step + 1,
        mlu=new_mlu,
    )


def _run_descent(
    index: RoutingIndex,
    demand_sets: list[np.ndarray],
    settings: SolverSettings,
    init_flat: np.ndarray,
    halt: bool,
    record_trace: bool,
) -> tuple[np.ndarray, np.ndarray, float, int, bool, list[tuple[int, float]]]:
    """Shared descent loop.  Demands cycle deterministically over
    ``demand_sets``; returns (best flat, averaged flat, best mlu, steps,
    converged, trace)."""
    eta0 = settings.step_size if settings.step_size is not None else _auto_step_size(index, demand_sets)
    flat = init_flat.copy()
    avg = np.zeros_like(flat)
    trace: list[tuple[int, float]] = []

    demands0 = demand_sets[0]
    _, mlu, _ = _max_util_edge(index, flat, demands0)
    best_mlu, best_flat = mlu, flat.copy()
    sig_best = mlu
    last_improve = 0
    if record_trace:
        trace.append((0, mlu))

    steps = 0
    converged = False
    for step in range(settings.max_steps):
        d = demand_sets[step % len(demand_sets)]
        e_star, mlu, _ = _max_util_edge(index, flat, d)
        g = _subgradient_flat(index, e_star, d)
        eta = eta0 / np.sqrt(step + 1.0)
        padded = index.padded_from_flat(flat - eta * g)
        flat = index.flat_from_padded(_project_rows(padded, index.mask))
        avg += flat
        steps = step + 1

        _, cur_mlu, _ = _max_util_edge(index, flat, demands0 if len(demand_sets) == 1 else d)
        if record_trace:
            trace.append((steps, cur_mlu))
        if len(demand_sets) == 1:
            if cur_mlu < best_mlu:
                best_mlu, best_flat = cur_mlu, flat.copy()
            if cur_mlu < sig_best - settings.halt_threshold:
                sig_best = cur_mlu
                last_improve = steps
            if halt and steps - last_improve >= settings.patience:
                converged = True
                break

    avg /= max(steps, 1)
    return best_flat, avg, best_mlu, steps, converged, trace


def solve_te(
    topo: Topology,
    tunnels: TunnelSet,
    tm: TrafficMatrix | np.ndarray,
    settings: SolverSettings | None = None,
    init: TeConfig | None = None,
    index: RoutingIndex | None = None,
    record_trace: bool = False,
) -> SolveResult:
    """Minimize MLU for one demand matrix by projected subgradient descent.

    Returns the best configuration seen (or the running average when
    ``settings.averaging``); ``converged`` is False when the step budget
    ran out before the improvement threshold kicked in.
    """
    settings = settings or SolverSettings()
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    init_flat = index.flat_from_config(init) if init is not None else index.uniform_flat()
    demands = index.demands(tm)
    best_flat, avg_flat, _, steps, converged, trace = _run_descent(
        index, [demands], settings, init_flat, halt=True, record_trace=record_trace
    )
    flat = avg_flat if settings.averaging else best_flat
    _, mlu, _ = _max_util_edge(index, flat, demands)
    return SolveResult(
        config=index.config_from_flat(flat),
        mlu=mlu,
        steps=steps,
        converged=converged,
        trace=trace,
    )


def solve_expected(
    topo: Topology,
    tunnels: TunnelSet,
    tm_samples: Sequence[TrafficMatrix | np.ndarray],
    settings: SolverSettings | None = None,
    init: TeConfig | None = None,
    index: RoutingIndex | None = None,
) -> tuple[TeConfig, float]:
    """Minimize the expected MLU over demand samples.

    Stochastic subgradient steps cycle deterministically through the
    samples; the averaged iterate is returned together with its expected
    MLU across all samples.
    """
    if not tm_samples:
        raise ValueError("need at least one demand sample")
    settings = settings or SolverSettings()
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    demand_sets = [index.demands(tm) for tm in tm_samples]
    init_flat = index.flat_from_config(init) if init is not None else index.uniform_flat()
    _, avg_flat, _, _, _, _ = _run_descent(
        index, demand_sets, settings, init_flat, halt=False, record_trace=False
    )
    expected = float(
        np.mean([_max_util_edge(index, avg_flat, d)[1] for d in demand_sets])
    )
    return index.config_from_flat(avg_flat), expected


@dataclass(frozen=True)
class FiniteAutomaton:
    """Deterministic automaton: ``transitions[symbol, state] -> state``."""

    transitions: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.transitions)
        if t.ndim != 2:
            raise ValueError("transitions must be (n_symbols, n_states)")
        if t.size and (t.min() < 0 or t.max() >= t.shape[1]):
            raise ValueError("transition targets out of range")
        object.__setattr__(self, "transitions", t.astype(np.intp))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_symbols(self) -> int:
        return self.transitions.shape[0]


def sequential_simulate(a: FiniteAutomaton, symbols: Sequence[int], q0: int) -> np.ndarray:
    """Reference step-by-step run; returns the T visited states."""
    states = np.empty(len(symbols), dtype=np.intp)
    q = int(q0)
    for i, s in enumerate(symbols):
        q = int(a.transitions[s, q])
        states[i] = q
    return states


def prefix_compose(tables: np.ndarray) -> tuple[np.ndarray, int]:
    """All prefix compositions of T state maps via recursive doubling.

    Level ``l`` folds maps ``2**l`` apart, so exactly ceil(log2 T) levels
    run; row t of the result maps any start state through the first t+1
    tables.
    """
    prefixes = np.asarray(tables, dtype=np.intp).copy()
    t_len = prefixes.shape[0]
    levels = 0
    offset = 1
    while offset < t_len:
        # new[t] = old[t] applied after old[t - offset]
        folded = np.take_along_axis(prefixes[offset:], prefixes[:-offset], axis=1)
        prefixes[offset:] = folded
        offset <<= 1
        levels += 1
    return prefixes, levels


def parallel_simulate(a: FiniteAutomaton, symbols: Sequence[int], q0: int) -> np.ndarray:
    """Trajectory via balanced composition of transition tables.

    Bit-identical to :func:`sequential_simulate`, but the data dependency
    depth is logarithmic in the word length.
    """
    symbols = np.asarray(symbols, dtype=np.intp)
    if symbols.size == 0:
        return np.empty(0, dtype=np.intp)
    if symbols.min() < 0 or symbols.max() >= a.n_symbols:
        raise ValueError("symbol out of range")
    word_tables = a.transitions[symbols]
    prefixes, _ = prefix_compose(word_tables)
    return prefixes[:, int(q0)]


def predict_wma(history: Sequence[TrafficMatrix | np.ndarray], decay: float = 0.9) -> TrafficMatrix:
    """Weighted moving average of demand matrices.

    ``history[0]`` is the most recent matrix; weights decay geometrically
    as ``decay ** i`` going back in time.
    """
    if not history:
        raise ValueError("history must be nonempty")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must be in (0, 1]")
    mats = [h.values if isinstance(h, TrafficMatrix) else np.asarray(h, dtype=np.float64) for h in history]
    weights = decay ** np.arange(len(mats))
    stacked = np.einsum("t,tij->ij", weights, np.stack(mats))
    return TrafficMatrix(stacked / weights.sum())
