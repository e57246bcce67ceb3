"""End-to-end adaptation on the differentiable MLU objective, plus the
evaluation harness that normalizes against the reference solver."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import OptimizerState, Tensor, backward, divide, matmul, mul, reduce_max, add, reduce_sum, reshape, concat, optimizer_step
from .model import TrafficModel, burst_line, failure_line
from .net import (
    RoutingIndex,
    TeConfig,
    Topology,
    TrafficMatrix,
    TunnelSet,
    apply_failures,
    evaluate_mlu,
)
from .solver import SolveResult, SolverSettings, predict_wma, solve_te
from .traffic import DatasetSplit, TrafficSeries, inject_burst, make_history_windows

__all__ = [
    "TrainingError",
    "TrainSettings",
    "EpochStats",
    "TrainResult",
    "EvalScenario",
    "EvalReport",
    "mlu_loss",
    "masked_ratios",
    "train",
    "evaluate",
    "critical_links",
    "run_failure_sweep",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    augmentation_probability: float = 0.10
    burst_scale: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.augmentation_probability <= 1.0:
            raise ValueError("augmentation_probability must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def mlu_loss(
    topo: Topology,
    tunnels: TunnelSet,
    tm: TrafficMatrix | np.ndarray,
    ratios: Tensor,
    index: RoutingIndex | None = None,
    demand_scale: np.ndarray | None = None,
    edge_keep: np.ndarray | None = None,
) -> Tensor:
    """Differentiable maximum link utilization of a flat ratio tensor.

    Mirrors the plain evaluator: flows are the incidence matrix applied to
    demand-weighted ratios, and the loss is the max flow/capacity ratio.
    ``demand_scale`` (per pair) and ``edge_keep`` (per edge) support
    failure scenarios where pairs lose all tunnels or links drop out.
    """
    if index is None:
        index = RoutingIndex.build(topo, tunnels)
    demands = index.demands(tm)
    if demand_scale is not None:
        demands = demands * demand_scale
    incidence = index.incidence
    if edge_keep is not None:
        incidence = incidence * edge_keep[:, None]
    per_tunnel = demands[index.pair_of_tunnel].reshape(-1, 1)
    w = mul(reshape(ratios, (index.total, 1)), Tensor(per_tunnel))
    flows = matmul(Tensor(incidence), w)
    util = divide(flows, Tensor(index.caps.reshape(-1, 1)))
    return reduce_max(util)


def masked_ratios(
    ratios: Tensor, index: RoutingIndex, failed_edges: Sequence[tuple[str, str]]
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Differentiable analogue of failure redistribution.

    Ratios on tunnels crossing a failed link are zeroed and each pair's
    survivors are renormalized (an epsilon keeps the division smooth and
    falls back to uniform when survivors carry no mass).  Returns the new
    ratio tensor, a per-pair demand mask (0 for disconnected pairs), and a
    per-edge keep mask.
    """
    failed = {tuple(e) for e in failed_edges}
    keep_tunnel = np.ones(index.total)
    g = 0
    for pair in index.pairs:
        for tun in index.tunnels.tunnels_for(pair):
            if any(ek in failed for ek in tun.edge_keys()):
                keep_tunnel[g] = 0.0
            g += 1
    survivors = np.zeros(index.n_pairs)
    np.add.at(survivors, index.pair_of_tunnel, keep_tunnel)
    pair_alive = (survivors > 0).astype(np.float64)

    group = np.zeros((index.n_pairs, index.total))
    group[index.pair_of_tunnel, np.arange(index.total)] = 1.0

    eps = Tensor(np.asarray(1e-9))
    masked = mul(add(ratios, eps), Tensor(keep_tunnel))
    col = reshape(masked, (index.total, 1))
    sums = matmul(Tensor(group), col)
    expanded = matmul(Tensor(group.T), sums)
    renorm = divide(col, add(expanded, Tensor(np.asarray(1e-30))))
    edge_keep = np.array(
        [0.0 if (e.src, e.dst) in failed else 1.0 for e in index.topo.edges]
    )
    return reshape(renorm, (index.total,)), pair_alive, edge_keep


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_mlu: float
    augmented_batches: int
    failure_batches: int
    burst_batches: int


@dataclass
class TrainResult:
    trace: list[EpochStats]
    best_epoch: int
    best_val_mlu: float
    best_state: dict[str, np.ndarray]
    batches: int
    augmented_batches: int

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "val_mlu", "augmented", "failures", "bursts"])
            for s in self.trace:
                writer.writerow(
                    [s.epoch, repr(s.mean_loss), repr(s.val_mlu), s.augmented_batches,
                     s.failure_batches, s.burst_batches]
                )


def _window_burst(history: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    var = history.var(axis=0)
    noise = rng.standard_normal(history.shape) * np.sqrt(scale * var)[None, :, :]
    out = np.maximum(0.0, history + noise)
    n = history.shape[1]
    out[:, np.arange(n), np.arange(n)] = 0.0
    return out


def train(
    model: TrafficModel,
    series: TrafficSeries,
    split: DatasetSplit,
    settings: TrainSettings,
) -> TrainResult:
    """Adapt the trainable parameters on batched MLU loss.

    Each batch is augmented with probability ``augmentation_probability``:
    a fair coin then picks either a uniformly random single-link failure
    (prompt line added, ratios masked and renormalized) or a burst
    perturbation of the history windows.  The checkpoint with the best
    validation MLU is retained.
    """
    window = model.config.encoder.history_window
    train_start = max(split.train.start, window)
    if train_start >= split.train.stop:
        raise TrainingError("training range too short for the history window")
    train_windows = make_history_windows(series, range(train_start, split.train.stop), window)
    val_windows = make_history_windows(series, split.validation, window)

    rng = np.random.default_rng(settings.seed)
    opt = OptimizerState(learning_rate=settings.learning_rate)
    index = model.index
    topo = model.topo

    trace: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] = model.params.state_arrays()
    total_batches = 0
    total_augmented = 0

    for epoch in range(settings.epochs):
        order = rng.permutation(len(train_windows))
        losses = []
        augmented = failures = bursts = 0
        for start in range(0, len(order), settings.batch_size):
            chunk = order[start : start + settings.batch_size]
            total_batches += 1

            constraints: list[str] = []
            failed_edge: tuple[str, str] | None = None
            burst = False
            if rng.random() < settings.augmentation_probability:
                augmented += 1
                total_augmented += 1
                if rng.random() < 0.5:
                    e = topo.edges[int(rng.integers(topo.n_edges))]
                    failed_edge = (e.src, e.dst)
                    constraints = [failure_line(*failed_edge)]
                    failures += 1
                else:
                    burst = True
                    constraints = [burst_line(settings.burst_scale)]
                    bursts += 1

            terms = []
            for sample_id in chunk:
                history, target = train_windows[sample_id]
                if burst:
                    history = _window_burst(history, settings.burst_scale, rng)
                out = model.forward(history, constraints)
                ratios = out.ratios
                demand_scale = None
                edge_keep = None
                if failed_edge is not None:
                    ratios, demand_scale, edge_keep = masked_ratios(ratios, index, [failed_edge])
                loss_t = mlu_loss(
                    topo, model.tunnels, target, ratios,
                    index=index, demand_scale=demand_scale, edge_keep=edge_keep,
                )
                terms.append(reshape(loss_t, (1,)))
            stacked = terms[0] if len(terms) == 1 else concat(terms, axis=0)
            batch_loss = mul(reduce_sum(stacked), Tensor(np.asarray(1.0 / len(terms))))
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {total_batches}"
                )
            losses.append(value)
            backward(batch_loss)
            optimizer_step(model.params, opt)

        val_mlu = float(
            np.mean(
                [
                    evaluate_mlu(topo, model.tunnels, TrafficMatrix(target),
                                 model.route_config(history), index=index)[0]
                    for history, target in val_windows
                ]
            )
        )
        trace.append(
            EpochStats(
                epoch=epoch,
                mean_loss=float(np.mean(losses)),
                val_mlu=val_mlu,
                augmented_batches=augmented,
                failure_batches=failures,
                burst_batches=bursts,
            )
        )
        if val_mlu < best_val:
            best_val = val_mlu
            best_epoch = epoch
            best_state = model.params.state_arrays()

    return TrainResult(
        trace=trace,
        best_epoch=best_epoch,
        best_val_mlu=best_val,
        best_state=best_state,
        batches=total_batches,
        augmented_batches=total_augmented,
    )


@dataclass
class EvalScenario:
    """What to stress during evaluation; ``tag`` names the report row."""

    kind: str = "normal"  # normal | failure | burst | drift
    failed_edges: tuple[tuple[str, str], ...] = ()
    burst_scale: float | None = None
    burst_seed: int = 0
    drift_segment: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("normal", "failure", "burst", "drift"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "burst" and (self.burst_scale is None or self.burst_scale <= 0):
            raise ValueError("burst scenario needs a positive burst_scale")
        if self.kind == "failure" and not self.failed_edges:
            raise ValueError("failure scenario needs failed edges")

    @property
    def tag(self) -> str:
        if self.kind == "normal":
            return "normal"
        if self.kind == "failure":
            return "failure-" + "+".join(f"{s}-{t}" for s, t in self.failed_edges)
        if self.kind == "burst":
            return f"burst-{self.burst_scale:g}"
        return f"drift-{self.drift_segment}"

    def constraint_lines(self) -> list[str]:
        lines = [failure_line(s, t) for s, t in self.failed_edges]
        if self.kind == "burst":
            lines.append(burst_line(self.burst_scale))
        return lines


@dataclass
class EvalReport:
    """Per-timestep MLU against the reference solver plus aggregates."""

    scenario: str
    policy: str
    timesteps: list[int]
    model_mlu: list[float]
    oracle_mlu: list[float]
    ratios: list[float]
    oracle_converged: list[bool]
    disconnected: list[int]
    aggregates: dict = field(default_factory=dict)

    @property
    def excluded(self) -> int:
        return sum(not c for c in self.oracle_converged)

    def finalize(self) -> "EvalReport":
        kept = [r for r, ok in zip(self.ratios, self.oracle_converged) if ok]
        if kept:
            arr = np.array(kept)
            self.aggregates = {
                "mean": float(arr.mean()),
                "median": float(np.median(arr)),
                "p95": float(np.percentile(arr, 95)),
                "count": len(kept),
                "excluded": self.excluded,
            }
        else:
            self.aggregates = {"mean": np.nan, "median": np.nan, "p95": np.nan,
                               "count": 0, "excluded": self.excluded}
        return self

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["timestep", "model_mlu", "oracle_mlu", "ratio", "oracle_converged", "disconnected"]
            )
            for row in zip(self.timesteps, self.model_mlu, self.oracle_mlu,
                           self.ratios, self.oracle_converged, self.disconnected):
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), int(row[4]), row[5]])

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "policy": self.policy,
            "timesteps": self.timesteps,
            "model_mlu": self.model_mlu,
            "oracle_mlu": self.oracle_mlu,
            "ratios": self.ratios,
            "oracle_converged": self.oracle_converged,
            "disconnected": self.disconnected,
            "aggregates": self.aggregates,
        }

    def save_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: str) -> "EvalReport":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(**obj)


def evaluate(
    model: TrafficModel,
    series: TrafficSeries,
    eval_range: range,
    scenario: EvalScenario | None = None,
    solver_settings: SolverSettings | None = None,
    policy: str = "model",
    oracle_mlus: Sequence[tuple[float, bool]] | None = None,
    wma_decay: float = 0.9,
) -> EvalReport:
    """Normalized-MLU evaluation over a range of timesteps.

    The reference solver supplies the denominator on each (possibly
    failure-reduced) instance; non-converged timesteps are flagged and
    excluded from aggregates.  ``policy`` selects the numerator: the
    trained model, a uniform split, or a solver run on a weighted
    moving-average prediction.
    """
    scenario = scenario or EvalScenario()
    if policy not in ("model", "uniform", "wma"):
        raise ValueError(f"unknown policy {policy!r}")
    settings = solver_settings or SolverSettings(max_steps=4000, patience=300, halt_threshold=1e-6)
    window = model.config.encoder.history_window
    if scenario.kind == "burst":
        series = inject_burst(series, scenario.burst_scale, scenario.burst_seed)
    windows = make_history_windows(series, eval_range, window)

    topo, tunnels = model.topo, model.tunnels
    constraints = scenario.constraint_lines()

    if scenario.failed_edges:
        base_adjust = apply_failures(topo, tunnels, TeConfig.uniform(tunnels), scenario.failed_edges)
        eff_tunnels = base_adjust.tunnels
        base_disconnected = len(base_adjust.disconnected)
    else:
        eff_tunnels = tunnels
        base_disconnected = 0
    eff_index = RoutingIndex.build(topo, eff_tunnels)

    report = EvalReport(
        scenario=scenario.tag,
        policy=policy,
        timesteps=[],
        model_mlu=[],
        oracle_mlu=[],
        ratios=[],
        oracle_converged=[],
        disconnected=[],
    )
    warm: TeConfig | None = None
    for (history, target), t in zip(windows, eval_range):
        tm = TrafficMatrix(target)

        if policy == "model":
            cfg = model.route_config(history, constraints)
        elif policy == "uniform":
            cfg = TeConfig.uniform(tunnels)
        else:
            predicted = predict_wma(list(history[::-1]), decay=wma_decay)
            cfg = solve_te(topo, tunnels, predicted, settings, init=warm).config

        if scenario.failed_edges:
            adjusted = apply_failures(topo, tunnels, cfg, scenario.failed_edges)
            cfg_eff = adjusted.config
            disconnected = len(adjusted.disconnected)
        else:
            cfg_eff = cfg
            disconnected = base_disconnected
        model_mlu, _ = evaluate_mlu(topo, eff_tunnels, tm, cfg_eff, index=eff_index)

        if oracle_mlus is not None:
            oracle_mlu, converged = oracle_mlus[t - eval_range.start]
        else:
            res: SolveResult = solve_te(topo, eff_tunnels, tm, settings, init=warm, index=eff_index)
            oracle_mlu, converged = res.mlu, res.converged
            warm = res.config

        if oracle_mlu > 1e-15:
            ratio = model_mlu / oracle_mlu
        else:
            ratio = 1.0 if model_mlu <= 1e-12 else np.inf
        report.timesteps.append(t)
        report.model_mlu.append(float(model_mlu))
        report.oracle_mlu.append(float(oracle_mlu))
        report.ratios.append(float(ratio))
        report.oracle_converged.append(bool(converged))
        report.disconnected.append(disconnected)
    return report.finalize()


def critical_links(
    topo: Topology,
    tunnels: TunnelSet,
    series: TrafficSeries,
    eval_range: range,
    solver_settings: SolverSettings | None = None,
    top: int = 18,
) -> list[tuple[str, str]]:
    """Rank links by the flow they carry under the solver's normal-case
    optimum for the mean demand of the range."""
    settings = solver_settings or SolverSettings(max_steps=4000, patience=300, halt_threshold=1e-6)
    mean_tm = TrafficMatrix(series.values[eval_range.start : eval_range.stop].mean(axis=0))
    index = RoutingIndex.build(topo, tunnels)
    res = solve_te(topo, tunnels, mean_tm, settings, index=index)
    flows = index.flows_from_flat(index.flat_from_config(res.config), index.demands(mean_tm))
    ranked = np.argsort(-flows, kind="stable")
    return [(topo.edges[i].src, topo.edges[i].dst) for i in ranked[: min(top, topo.n_edges)]]


def run_failure_sweep(
    model: TrafficModel,
    series: TrafficSeries,
    eval_range: range,
    n_links: int = 18,
    solver_settings: SolverSettings | None = None,
    policy: str = "model",
) -> list[EvalReport]:
    """One failure report per critical link, most critical first."""
    links = critical_links(model.topo, model.tunnels, series, eval_range, solver_settings, n_links)
    reports = []
    for link in links:
        scenario = EvalScenario(kind="failure", failed_edges=(link,))
        reports.append(
            evaluate(model, series, eval_range, scenario, solver_settings, policy=policy)
        )
    return reports
