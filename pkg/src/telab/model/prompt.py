"""Deterministic task prompts: role, network summary, demand statistics,
and ad hoc constraint lines (failures, expected bursts)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..net import Topology, TunnelSet
from .alignment import encode_text

__all__ = [
    "PromptError",
    "TrafficStats",
    "Prompt",
    "traffic_stats",
    "failure_line",
    "burst_line",
    "build_prompt",
]


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficStats:
    mean: float
    peak: float
    variance: float


def traffic_stats(history: np.ndarray) -> TrafficStats:
    """Summary statistics over the off-diagonal entries of a history window."""
    history = np.asarray(history, dtype=np.float64)
    n = history.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    vals = history.reshape(-1, n, n)[:, mask]
    return TrafficStats(mean=float(vals.mean()), peak=float(vals.max()), variance=float(vals.var()))


def failure_line(src: str, dst: str) -> str:
    return f"Link {src}-{dst} is currently down."


def burst_line(scale: float | None = None) -> str:
    if scale is None:
        return "Expect sudden traffic bursts."
    return f"Expect sudden traffic bursts around {scale:g}x variance."


@dataclass
class Prompt:
    role: str
    topology_summary: str
    traffic_summary: str
    constraints: tuple[str, ...]
    token_ids: np.ndarray
    truncated: bool

    @property
    def text(self) -> str:
        lines = [self.role, self.topology_summary, self.traffic_summary, *self.constraints]
        return " ".join(lines)

    def __len__(self) -> int:
        return len(self.token_ids)


def build_prompt(
    topo: Topology,
    tunnels: TunnelSet,
    stats: TrafficStats,
    constraints: Sequence[str] = (),
    vocab_size: int = 1024,
    max_tokens: int = 96,
) -> Prompt:
    """Render and tokenize the task prompt.

    Rendering is a pure function of its inputs.  If the token budget is
    exceeded, constraint lines are dropped last-in-first-out and the prompt
    is flagged truncated; the three base sections must always fit.
    """
    caps = topo.capacities
    role = "You are a WAN traffic engineer."
    topology_summary = (
        f"The network has {topo.n_nodes} routers and {topo.n_edges} directed links "
        f"carrying {tunnels.total_tunnels} tunnels. "
        f"Link capacity min {caps.min():.4g} mean {caps.mean():.4g} max {caps.max():.4g}."
    )
    traffic_summary = (
        f"Recent demand mean {stats.mean:.4g} peak {stats.peak:.4g} "
        f"variance {stats.variance:.4g}."
    )
    kept = list(constraints)
    truncated = False
    while True:
        text = " ".join([role, topology_summary, traffic_summary, *kept])
        ids = encode_text(text, vocab_size)
        if len(ids) <= max_tokens:
            break
        if not kept:
            raise PromptError(
                f"base prompt needs {len(ids)} tokens but the budget is {max_tokens}"
            )
        kept.pop()
        truncated = True
    return Prompt(
        role=role,
        topology_summary=topology_summary,
        traffic_summary=traffic_summary,
        constraints=tuple(kept),
        token_ids=ids,
        truncated=truncated,
    )
