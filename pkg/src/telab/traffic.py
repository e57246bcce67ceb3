"""Synthetic demand generation and dataset preparation.

Gravity-model series with trend/seasonality/noise, chronological splits,
history windowing, burst perturbation, and drift segmentation.  All
randomness flows through explicitly seeded generators.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .net import RoutingError, Topology, TrafficMatrix

__all__ = [
    "GravitySpec",
    "TrafficSeries",
    "DatasetSplit",
    "default_masses",
    "generate_gravity_series",
    "split_dataset",
    "make_history_windows",
    "inject_burst",
    "segment_for_drift",
    "save_series_csv",
    "load_series_csv",
    "save_series",
    "load_series",
]

DRIFT_SEGMENTS = ("0-25", "25-50", "50-75")


@dataclass
class GravitySpec:
    """Parameters of the gravity demand generator.

    ``node_masses=None`` defers to :func:`default_masses` (out-degree + 1).
    ``noise_std`` is relative: the noise std for a pair is ``noise_std``
    times that pair's gravity baseline.
    """

    total_volume: float = 100.0
    trend_slope: float = 0.0
    season_amplitude: float = 0.0
    season_period: int = 24
    noise_std: float = 0.0
    seed: int = 0
    node_masses: Sequence[float] | None = None

    def __post_init__(self) -> None:
        if self.total_volume <= 0:
            raise ValueError("total_volume must be positive")
        if self.season_period < 1:
            raise ValueError("season_period must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.node_masses is not None and any(m <= 0 for m in self.node_masses):
            raise ValueError("node masses must be positive")

    def to_dict(self) -> dict:
        return {
            "total_volume": self.total_volume,
            "trend_slope": self.trend_slope,
            "season_amplitude": self.season_amplitude,
            "season_period": self.season_period,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "node_masses": None if self.node_masses is None else list(self.node_masses),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GravitySpec":
        return cls(**obj)


class TrafficSeries:
    """Time-ordered stack of demand matrices sharing one node order."""

    def __init__(self, values: np.ndarray, nodes: Sequence[str], meta: dict | None = None) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise RoutingError(f"series must be (T, n, n), got {values.shape}")
        if values.shape[0] == 0:
            raise RoutingError("empty traffic series")
        if values.shape[1] != len(nodes):
            raise RoutingError("node list does not match matrix dimension")
        self.values = values
        self.nodes = tuple(str(n) for n in nodes)
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def matrix(self, t: int) -> TrafficMatrix:
        return TrafficMatrix(self.values[t])

    def slice(self, rng: range, tag: str | None = None) -> "TrafficSeries":
        meta = dict(self.meta)
        if tag:
            meta["provenance"] = tag
        return TrafficSeries(self.values[rng.start : rng.stop], self.nodes, meta)


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous chronological train/validation/test index ranges."""

    train: range
    validation: range
    test: range


def default_masses(topo: Topology) -> np.ndarray:
    out_deg = np.zeros(topo.n_nodes)
    for e in topo.edges:
        out_deg[topo.node_index[e.src]] += 1.0
    return out_deg + 1.0


def generate_gravity_series(topo: Topology, spec: GravitySpec, length: int) -> TrafficSeries:
    """Gravity baseline modulated by trend + seasonality, plus scaled noise.

    Entry (i, j) at time t is ``max(0, base_ij * s(t) + eps)`` with
    ``s(t) = 1 + trend_slope * t + season_amplitude * sin(2 pi t / period)``
    and ``eps ~ Normal(0, noise_std * base_ij)``.  Deterministic per seed.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    n = topo.n_nodes
    masses = np.asarray(spec.node_masses if spec.node_masses is not None else default_masses(topo), dtype=np.float64)
    if masses.shape != (n,):
        raise ValueError(f"expected {n} node masses, got {masses.shape}")
    outer = np.outer(masses, masses)
    np.fill_diagonal(outer, 0.0)
    base = spec.total_volume * outer / outer.sum()

    t = np.arange(length, dtype=np.float64)
    season = spec.season_amplitude * np.sin(2.0 * np.pi * t / spec.season_period)
    scale = 1.0 + spec.trend_slope * t + season

    rng = np.random.default_rng(spec.seed)
    eps = rng.standard_normal((length, n, n)) * (spec.noise_std * base)
    values = np.maximum(0.0, base[None, :, :] * scale[:, None, None] + eps)
    values[:, np.arange(n), np.arange(n)] = 0.0
    return TrafficSeries(values, topo.nodes, meta={"provenance": "gravity", "spec": spec.to_dict()})


def split_dataset(series: TrafficSeries, ratios: tuple[float, float, float]) -> DatasetSplit:
    """Chronological split at floor(cumulative ratio * length) boundaries."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios sum to {sum(ratios)}, not 1")
    n = len(series)
    # tiny bias so float noise in the cumulative ratios cannot shift a
    # boundary that is exact in real arithmetic ((0.7+0.1)*10 < 8 in f64)
    b1 = int(np.floor(ratios[0] * n + 1e-9))
    b2 = int(np.floor((ratios[0] + ratios[1]) * n + 1e-9))
    split = DatasetSplit(train=range(0, b1), validation=range(b1, b2), test=range(b2, n))
    for rng_ in (split.train, split.validation, split.test):
        if len(rng_) < 1:
            raise ValueError(f"series of length {n} too short for split {ratios}")
    return split


def make_history_windows(
    series: TrafficSeries, index_range: range, window: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(history, target) pairs for each target index in ``index_range``.

    Histories are chronological slices of ``window`` matrices ending just
    before the target.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if index_range.start - window < 0:
        raise ValueError(
            f"range starting at {index_range.start} lacks a {window}-step lead-in"
        )
    if index_range.stop > len(series):
        raise ValueError("range extends past the end of the series")
    return [
        (series.values[t - window : t], series.values[t]) for t in index_range
    ]


def inject_burst(series: TrafficSeries, scale: float, seed: int) -> TrafficSeries:
    """Add zero-mean noise with variance ``scale`` times each pair's
    temporal variance, clamped at zero.  Constant pairs are untouched."""
    if scale <= 0:
        raise ValueError("burst scale must be positive")
    if len(series) < 2:
        raise ValueError("need at least two intervals to estimate variance")
    var = series.values.var(axis=0)
    std = np.sqrt(scale * var)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(series.values.shape) * std[None, :, :]
    values = np.maximum(0.0, series.values + noise)
    n = series.n_nodes
    values[:, np.arange(n), np.arange(n)] = 0.0
    meta = dict(series.meta)
    meta["provenance"] = f"{meta.get('provenance', 'series')}+burst-{scale:g}"
    return TrafficSeries(values, series.nodes, meta)


def segment_for_drift(series: TrafficSeries, segment: str) -> tuple[range, range, range]:
    """Early-quarter training range with fixed validation/test windows.

    ``segment`` picks the training quarter; validation is always [75%, 85%)
    and test the final 15%.
    """
    if segment not in DRIFT_SEGMENTS:
        raise ValueError(f"segment must be one of {DRIFT_SEGMENTS}")
    n = len(series)
    if n < 20:
        raise ValueError(f"series of length {n} too short for drift segmentation")
    quarter = DRIFT_SEGMENTS.index(segment)
    train = range(int(np.floor(0.25 * quarter * n)), int(np.floor(0.25 * (quarter + 1) * n)))
    val = range(int(np.floor(0.75 * n)), int(np.floor(0.85 * n)))
    test = range(int(np.floor(0.85 * n)), n)
    return train, val, test


def save_series_csv(path: str, series: TrafficSeries) -> None:
    """One row per interval, |V|^2 row-major columns, 'i->j' header."""
    nodes = series.nodes
    header = [f"{i}->{j}" for i in nodes for j in nodes]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in series.values.reshape(len(series), -1):
            writer.writerow([repr(float(x)) for x in row])


def load_series_csv(path: str, meta: dict | None = None) -> TrafficSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [np.array([float(x) for x in row]) for row in reader]
    n2 = len(header)
    n = int(round(np.sqrt(n2)))
    if n * n != n2:
        raise RoutingError(f"CSV has {n2} columns, not a square count")
    nodes = [label.partition("->")[2] for label in header[:n]]
    values = np.stack(rows).reshape(len(rows), n, n)
    return TrafficSeries(values, nodes, meta)


def save_series(path_csv: str, series: TrafficSeries, sidecar_path: str | None = None) -> None:
    """CSV plus a JSON sidecar holding the generator spec and seed."""
    save_series_csv(path_csv, series)
    sidecar = sidecar_path or f"{path_csv}.meta.json"
    with open(sidecar, "w") as fh:
        json.dump({"nodes": list(series.nodes), "meta": series.meta}, fh, indent=2, sort_keys=True)


def load_series(path_csv: str, sidecar_path: str | None = None) -> TrafficSeries:
    sidecar = sidecar_path or f"{path_csv}.meta.json"
    meta = None
    try:
        with open(sidecar) as fh:
            meta = json.load(fh).get("meta")
    except FileNotFoundError:
        pass
    return load_series_csv(path_csv, meta)
