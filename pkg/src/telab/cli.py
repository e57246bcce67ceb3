"""Command-line entry point for reproducible experiments.

Subcommands: gen-data, solve, train, eval, report, simulate-automaton.
Every run writes its artifacts plus a provenance JSON (resolved config,
seed, artifact checksums); re-running with that JSON reproduces the same
outputs.  Failures remove partial outputs and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, derive_seed
from .model import TrafficModel
from .net import RoutingError, TeConfig, TopologyError, load_topology, select_tunnels
from .solver import (
    FiniteAutomaton,
    parallel_simulate,
    prefix_compose,
    sequential_simulate,
    solve_expected,
    solve_te,
)
from .traffic import (
    DatasetSplit,
    GravitySpec,
    generate_gravity_series,
    load_series,
    save_series,
    segment_for_drift,
    split_dataset,
)
from .training import EvalScenario, EvalReport, critical_links, evaluate, train

__all__ = ["main", "emit_report", "BURST_SCALES"]

BURST_SCALES = (2.0, 5.0, 10.0, 20.0, 30.0)
DEFAULT_OUT = "telab-out"


class CliError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactRun:
    """Tracks files written by one subcommand; cleans up on failure and
    records provenance on success."""

    def __init__(self, out_dir: str, command: str, cfg: ExperimentConfig) -> None:
        self.out_dir = Path(out_dir)
        self.command = command
        self.cfg = cfg
        self.registered: list[Path] = []
        self.extra: dict = {}
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> str:
        p = self.out_dir / name
        self.registered.append(p)
        return str(p)

    def discard(self) -> None:
        for p in self.registered:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass

    def finish(self) -> Path:
        artifacts = {}
        for p in self.registered:
            if not p.exists():
                raise CliError(f"expected artifact {p} was not written")
            artifacts[p.name] = _sha256(p)
        provenance = {
            "command": self.command,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "artifacts": artifacts,
        }
        if self.extra:
            provenance["summary"] = self.extra
        prov_path = self.out_dir / f"{self.command}-provenance.json"
        with open(prov_path, "w") as fh:
            json.dump(provenance, fh, indent=2, sort_keys=True)
        print(f"[{self.command}] wrote {len(artifacts)} artifacts to {self.out_dir}")
        return prov_path


_OVERRIDES = {
    "topology": "topology",
    "nodes_from": "topology",
    "series": "series",
    "checkpoint": "checkpoint",
    "seed": "seed",
    "tunnel_k": "tunnel_k",
    "window": "window",
    "length": "series_length",
    "volume": "gravity_total_volume",
    "trend": "gravity_trend",
    "amplitude": "gravity_amplitude",
    "period": "gravity_period",
    "noise": "gravity_noise",
    "epochs": "train_epochs",
    "batch_size": "train_batch_size",
    "learning_rate": "train_learning_rate",
    "augmentation": "augmentation_probability",
    "burst_scale": "burst_scale",
    "model_preset": "model_preset",
    "scenario": "scenario",
    "scale": "scenario_scale",
    "failures": "scenario_failures",
    "link": "scenario_link",
    "segment": "scenario_segment",
    "policy": "policy",
    "drift_segment": "drift_segment",
    "max_steps": "solver_max_steps",
    "patience": "solver_patience",
    "halt_threshold": "solver_halt_threshold",
    "step_size": "solver_step_size",
}


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for attr, field_name in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, field_name, value)
    out_flag = getattr(args, "out_dir", None)
    if out_flag:
        cfg.output_dir = out_flag
    elif cfg.output_dir == DEFAULT_OUT and os.environ.get("TELAB_OUT"):
        cfg.output_dir = os.environ["TELAB_OUT"]
    return cfg


def _load_instance(cfg: ExperimentConfig):
    if not cfg.topology:
        raise CliError("a topology file is required (--topology/--nodes-from)")
    topo = load_topology(cfg.topology)
    tunnels = select_tunnels(topo, cfg.tunnel_k)
    return topo, tunnels


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    topo, _ = _load_instance(cfg) if cfg.topology else (None, None)
    run = ArtifactRun(cfg.output_dir, "gen-data", cfg)
    try:
        spec = GravitySpec(
            total_volume=cfg.gravity_total_volume,
            trend_slope=cfg.gravity_trend,
            season_amplitude=cfg.gravity_amplitude,
            season_period=cfg.gravity_period,
            noise_std=cfg.gravity_noise,
            seed=derive_seed(cfg.seed, "data"),
        )
        series = generate_gravity_series(topo, spec, cfg.series_length)
        save_series(run.path("series.csv"), series, run.path("series.csv.meta.json"))
        run.extra = {"length": len(series), "nodes": topo.n_nodes}
        run.finish()
        return 0
    except Exception:
        run.discard()
        raise


def _cmd_solve(args) -> int:
    cfg = _resolve_config(args)
    topo, tunnels = _load_instance(cfg)
    run = ArtifactRun(cfg.output_dir, "solve", cfg)
    try:
        if not cfg.series:
            raise CliError("a demand CSV is required (--tm)")
        series = load_series(cfg.series)
        settings = cfg.solver_settings()
        if args.expected:
            config, expected = solve_expected(
                topo, tunnels, [series.matrix(t) for t in range(len(series))], settings
            )
            summary = {"mode": "expected", "expected_mlu": expected, "samples": len(series)}
            trace = []
        else:
            interval = args.interval if args.interval is not None else 0
            result = solve_te(topo, tunnels, series.matrix(interval), settings, record_trace=True)
            config = result.config
            trace = result.trace
            summary = {
                "mode": "single",
                "interval": interval,
                "mlu": result.mlu,
                "steps": result.steps,
                "converged": result.converged,
            }
        with open(run.path("te_config.json"), "w") as fh:
            json.dump(config.to_json_dict(), fh, indent=2, sort_keys=True)
        with open(run.path("convergence.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "mlu"])
            for step, mlu in trace:
                writer.writerow([step, repr(mlu)])
        run.extra = summary
        run.finish()
        return 0
    except Exception:
        run.discard()
        raise


def _split_for(cfg: ExperimentConfig, series) -> DatasetSplit:
    if cfg.drift_segment:
        train_rng, val_rng, test_rng = segment_for_drift(series, cfg.drift_segment)
        return DatasetSplit(train=train_rng, validation=val_rng, test=test_rng)
    return split_dataset(series, cfg.split)


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    topo, tunnels = _load_instance(cfg)
    run = ArtifactRun(cfg.output_dir, "train", cfg)
    try:
        if not cfg.series:
            raise CliError("a demand series is required (--series)")
        series = load_series(cfg.series)
        split = _split_for(cfg, series)
        model = TrafficModel(topo, tunnels, cfg.model_config())
        result = train(model, series, split, cfg.train_settings())
        model.params.load_state_arrays(result.best_state)
        model.save(run.path("checkpoint.bin"))
        result.to_csv(run.path("trace.csv"))
        if args.dump_prompt:
            window = cfg.window
            t0 = max(split.train.start, window)
            out = model.forward(series.values[t0 - window : t0])
            with open(run.path("prompt.txt"), "w") as fh:
                fh.write(out.prompt.text + "\n")
        run.extra = {
            "batches": result.batches,
            "augmented_batches": result.augmented_batches,
            "best_epoch": result.best_epoch,
            "best_val_mlu": result.best_val_mlu,
            "trainable_parameters": model.trainable_parameter_count(),
        }
        run.finish()
        return 0
    except Exception:
        run.discard()
        raise


def _build_scenario(cfg: ExperimentConfig, topo, tunnels, series, eval_range) -> EvalScenario:
    if cfg.scenario == "normal":
        return EvalScenario()
    if cfg.scenario == "failure":
        if cfg.scenario_link:
            src, _, dst = cfg.scenario_link.partition("-")
            link = (src, dst)
        else:
            link = critical_links(topo, tunnels, series, eval_range, cfg.solver_settings(), top=1)[0]
        return EvalScenario(kind="failure", failed_edges=(link,))
    if cfg.scenario == "multi-failure":
        rng = np.random.default_rng(derive_seed(cfg.seed, "scenario"))
        chosen = rng.choice(topo.n_edges, size=min(cfg.scenario_failures, topo.n_edges), replace=False)
        edges = tuple((topo.edges[i].src, topo.edges[i].dst) for i in sorted(chosen))
        return EvalScenario(kind="failure", failed_edges=edges)
    if cfg.scenario == "burst":
        if cfg.scenario_scale not in BURST_SCALES:
            raise CliError(f"burst scale must be one of {sorted(BURST_SCALES)}")
        return EvalScenario(
            kind="burst", burst_scale=cfg.scenario_scale, burst_seed=derive_seed(cfg.seed, "burst")
        )
    if cfg.scenario == "drift":
        return EvalScenario(kind="drift", drift_segment=cfg.scenario_segment)
    raise CliError(f"unknown scenario {cfg.scenario!r}")


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    topo, tunnels = _load_instance(cfg)
    run = ArtifactRun(cfg.output_dir, "eval", cfg)
    try:
        if not cfg.series:
            raise CliError("a demand series is required (--series)")
        series = load_series(cfg.series)
        if cfg.scenario == "drift":
            _, _, eval_range = segment_for_drift(series, cfg.scenario_segment)
        else:
            eval_range = _split_for(cfg, series).test
        model = TrafficModel(topo, tunnels, cfg.model_config())
        if cfg.checkpoint:
            model.load(cfg.checkpoint)
        scenario = _build_scenario(cfg, topo, tunnels, series, eval_range)
        report = evaluate(
            model, series, eval_range, scenario, cfg.solver_settings(), policy=cfg.policy
        )
        report.to_csv(run.path("report.csv"))
        report.save_json(run.path("report.json"))
        if args.dump_prompt:
            window = cfg.window
            t0 = eval_range.start
            out = model.forward(series.values[t0 - window : t0], scenario.constraint_lines())
            with open(run.path("prompt.txt"), "w") as fh:
                fh.write(out.prompt.text + "\n")
        run.extra = {"scenario": report.scenario, "aggregates": report.aggregates}
        run.finish()
        return 0
    except Exception:
        run.discard()
        raise


def emit_report(reports: list[EvalReport | dict]) -> list[dict]:
    """Comparison table across scenarios, with degradation relative to the
    normal-case row.  Requires exactly one normal row and finalized
    aggregates in every report."""
    rows = []
    for rep in reports:
        obj = rep.to_json_dict() if isinstance(rep, EvalReport) else rep
        if "aggregates" not in obj or "scenario" not in obj:
            raise CliError("report missing aggregates or scenario tag")
        agg = obj["aggregates"]
        if not all(k in agg for k in ("mean", "median", "p95")):
            raise CliError(f"report {obj.get('scenario')} has incomplete aggregates")
        rows.append(
            {
                "scenario": obj["scenario"],
                "policy": obj.get("policy", "model"),
                "mean": agg["mean"],
                "median": agg["median"],
                "p95": agg["p95"],
                "count": agg.get("count", 0),
                "excluded": agg.get("excluded", 0),
            }
        )
    normals = [r for r in rows if r["scenario"] == "normal"]
    if len(normals) != 1:
        raise CliError(f"need exactly one normal-case report, got {len(normals)}")
    base = normals[0]["mean"]
    for r in rows:
        r["degradation_pct"] = 100.0 * (r["mean"] - base) / base
    rows.sort(key=lambda r: (r["scenario"] != "normal", r["scenario"]))
    return rows


def _cmd_report(args) -> int:
    cfg = _resolve_config(args)
    run = ArtifactRun(cfg.output_dir, "report", cfg)
    try:
        reports = [EvalReport.from_json(p) for p in args.reports]
        rows = emit_report(reports)
        with open(run.path("comparison.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        with open(run.path("comparison.json"), "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
        run.finish()
        return 0
    except Exception:
        run.discard()
        raise


def _cmd_simulate_automaton(args) -> int:
    cfg = _resolve_config(args)
    run = ArtifactRun(cfg.output_dir, "simulate-automaton", cfg)
    try:
        rng = np.random.default_rng(cfg.seed)
        automaton = FiniteAutomaton(rng.integers(0, args.states, size=(args.symbols, args.states)))
        word = rng.integers(0, args.symbols, size=args.length)
        q0 = int(rng.integers(0, args.states))
        seq = sequential_simulate(automaton, word, q0)
        par = parallel_simulate(automaton, word, q0)
        _, levels = prefix_compose(automaton.transitions[word])
        identical = bool(np.array_equal(seq, par))
        with open(run.path("automaton.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "symbol", "sequential_state", "parallel_state"])
            for i, (s, a, b) in enumerate(zip(word, seq, par)):
                writer.writerow([i + 1, int(s), int(a), int(b)])
        run.extra = {
            "identical": identical,
            "levels": levels,
            "expected_levels": int(np.ceil(np.log2(args.length))) if args.length > 1 else 0,
            "states": args.states,
            "length": args.length,
        }
        run.finish()
        if not identical:
            raise CliError("parallel and sequential trajectories disagree")
        return 0
    except Exception:
        run.discard()
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="telab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="experiment config JSON (or a provenance file)")
        p.add_argument("--out-dir", help="output directory (env TELAB_OUT overrides the default)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a gravity-model demand series")
    common(p)
    p.add_argument("--nodes-from", help="topology file supplying nodes and default masses")
    p.add_argument("--length", type=int)
    p.add_argument("--volume", type=float)
    p.add_argument("--trend", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--period", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("solve", help="run the reference solver on a demand matrix or series")
    common(p)
    p.add_argument("--topology")
    p.add_argument("--tm", dest="series", help="demand series CSV")
    p.add_argument("--interval", type=int, help="row to solve (default 0)")
    p.add_argument("--expected", action="store_true", help="minimize expected MLU over all rows")
    p.add_argument("--tunnel-k", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--halt-threshold", type=float)
    p.add_argument("--step-size", type=float)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("train", help="fit the route-splitting model")
    common(p)
    p.add_argument("--topology")
    p.add_argument("--series")
    p.add_argument("--tunnel-k", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--augmentation", type=float)
    p.add_argument("--burst-scale", type=float)
    p.add_argument("--model-preset", choices=["small", "default"])
    p.add_argument("--drift-segment", choices=["0-25", "25-50", "50-75"])
    p.add_argument("--dump-prompt", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a scenario")
    common(p)
    p.add_argument("--topology")
    p.add_argument("--series")
    p.add_argument("--checkpoint")
    p.add_argument("--tunnel-k", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--model-preset", choices=["small", "default"])
    p.add_argument("--scenario", choices=["normal", "failure", "multi-failure", "burst", "drift"])
    p.add_argument("--scale", type=float, choices=list(BURST_SCALES))
    p.add_argument("--failures", type=int)
    p.add_argument("--link", help="explicit failed link as src-dst")
    p.add_argument("--segment", choices=["0-25", "25-50", "50-75"])
    p.add_argument("--policy", choices=["model", "uniform", "wma"])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--halt-threshold", type=float)
    p.add_argument("--dump-prompt", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="aggregate evaluation reports into a comparison table")
    common(p)
    p.add_argument("reports", nargs="+", help="EvalReport JSON files")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("simulate-automaton", help="parallel vs sequential automaton demo")
    common(p)
    p.add_argument("--states", type=int, default=16)
    p.add_argument("--symbols", type=int, default=4)
    p.add_argument("--length", type=int, default=64)
    p.set_defaults(func=_cmd_simulate_automaton)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, TopologyError, RoutingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
