"""Scenario runner command line.

Subcommands: ``run`` executes one scenario and writes a line-delimited
trace, a summary document, and a machine-readable manifest; ``compare``
runs two scenarios and reports the metric ratio; ``validate`` checks a
scenario file without running it.

Exit codes: 0 success, 2 configuration error, 3 infeasible portfolio,
4 cluster exhausted, 5 numerical failure.

Summaries and traces contain no nondeterministic fields; wall-clock
timestamps appear only in the manifest.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import yaml

from .core import (
    BatchingError,
    ClusterExhaustedError,
    ConfigError,
    InfeasiblePortfolioError,
    NumericalFailureError,
    SyncMode,
)
from .scenario import ScenarioDoc, doc_to_dict, dump_scenario, load_scenario
from .simkernel import simulate
from .trainer import Dataset, ModelSpec, TrainResult, train_asp, train_bsp
from . import simkernel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_EXHAUSTED = 4
EXIT_NUMERIC = 5

SCHEMA_VERSION = 1


class _TraceWriter:
    """Streams records to a JSONL file so partial traces survive errors."""

    def __init__(self, path: Path):
        self.path = path
        self.fh = path.open("w")

    def __call__(self, record: dict) -> None:
        record = {"schema_version": SCHEMA_VERSION, **record}
        self.fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if not self.fh.closed:
            self.fh.close()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _train_result_summary(result: TrainResult, doc: ScenarioDoc) -> dict:
    assert doc.trainer is not None
    losses = [r.loss for r in result.losses]
    threshold = doc.trainer.loss_threshold
    reached = None
    if threshold is not None:
        for rec in result.losses:
            if rec.loss <= threshold:
                reached = rec.iteration
                break
    return {
        "mode": "train",
        "model": doc.trainer.model.value,
        "iterations": len(result.losses),
        "final_loss": losses[-1] if losses else None,
        "loss_threshold": threshold,
        "iterations_to_threshold": reached,
        "final_params": [float(v) for v in result.params],
        "loss_curve": losses,
    }


def run_training(doc: ScenarioDoc, on_record=None) -> TrainResult:
    """Train the scenario's model under its allocation."""
    t = doc.trainer
    assert t is not None
    sim = doc.sim
    dataset = Dataset.generate(t.model, t.n, t.dim, t.noise_sigma, seed=sim.seed)
    model = ModelSpec.zeros(t.model, t.dim, t.eta)
    alloc = simkernel.build_initial_allocation(sim)
    if sim.cluster.sync_mode is SyncMode.BSP:
        return train_bsp(model, dataset, alloc, t.iterations, seed=sim.seed, on_record=on_record)
    # ASP replays the commit schedule of a controller-free simulation of
    # the same cluster at this allocation.
    sched_scenario = simkernel.Scenario(
        cluster=sim.cluster,
        initial_alloc=simkernel.Explicit(sizes=dict(alloc.sizes)),
        horizon=simkernel.Horizon(max_iterations=t.iterations),
        controller=None,
        perf=sim.perf,
        default_perf=sim.default_perf,
        events=(),
        restart_cost=sim.restart_cost,
        sync_cost=sim.sync_cost,
        seed=sim.seed,
    )
    schedule = simkernel.asp_commit_schedule(simulate(sched_scenario))
    return train_asp(model, dataset, alloc, schedule, seed=sim.seed, on_record=on_record)


def _execute(doc: ScenarioDoc, out_dir: Path) -> tuple[dict, dict]:
    """Run a scenario doc; returns (summary, extra manifest fields)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.jsonl"
    writer = _TraceWriter(trace_path)
    try:
        if doc.mode == "train":
            result = run_training(doc, on_record=writer)
            summary = {"scenario": doc_to_dict(doc), "result": _train_result_summary(result, doc)}
        else:
            sim_result = simulate(doc.sim, on_record=writer)
            summary = {"scenario": doc_to_dict(doc), "result": sim_result.summary_dict()}
    finally:
        writer.close()
    _write_json(out_dir / "summary.json", summary)
    return summary, {"trace": str(trace_path), "summary": str(out_dir / "summary.json")}


def _manifest(out_dir: Path, doc_path: str, status: str, exit_code: int, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "scenario": doc_path,
        "status": status,
        "exit_code": exit_code,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **extra,
    }
    _write_json(out_dir / "manifest.json", payload)


def _exit_code_for(err: BatchingError) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, InfeasiblePortfolioError):
        return EXIT_INFEASIBLE
    if isinstance(err, ClusterExhaustedError):
        return EXIT_EXHAUSTED
    if isinstance(err, NumericalFailureError):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key] = yaml.safe_load(value)
    return out


def cmd_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        doc = load_scenario(args.scenario, overrides)
    except BatchingError as err:
        code = _exit_code_for(err)
        _manifest(out_dir, str(args.scenario), "error", code, {"error": str(err)})
        print(f"error: {err}", file=sys.stderr)
        return code
    try:
        _, outputs = _execute(doc, out_dir)
    except BatchingError as err:
        code = _exit_code_for(err)
        _manifest(out_dir, doc.path, "error", code, {"error": str(err)})
        print(f"error: {err}", file=sys.stderr)
        return code
    _manifest(out_dir, doc.path, "ok", EXIT_OK, outputs)
    print(f"ok: wrote {outputs['trace']} and {outputs['summary']}")
    return EXIT_OK


def _metric_of(summary: dict, doc: ScenarioDoc) -> tuple[str, float]:
    result = summary["result"]
    if doc.mode == "train":
        reached = result.get("iterations_to_threshold")
        if doc.trainer is not None and doc.trainer.loss_threshold is not None and reached:
            return "iterations_to_threshold", float(reached)
        return "final_loss", float(result["final_loss"])
    return "total_time", float(result["total_time"])


def cmd_compare(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    overrides = _parse_overrides(args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        doc_a = load_scenario(args.scenario_a, dict(overrides))
        doc_b = load_scenario(args.scenario_b, dict(overrides))
        summary_a, _ = _execute(doc_a, out_dir / "a")
        summary_b, _ = _execute(doc_b, out_dir / "b")
    except BatchingError as err:
        code = _exit_code_for(err)
        _manifest(out_dir, f"{args.scenario_a},{args.scenario_b}", "error", code, {"error": str(err)})
        print(f"error: {err}", file=sys.stderr)
        return code
    name_a, value_a = _metric_of(summary_a, doc_a)
    name_b, value_b = _metric_of(summary_b, doc_b)
    ratio = value_a / value_b if value_b else float("inf")
    report = {
        "metric": name_a if name_a == name_b else f"{name_a}/{name_b}",
        "a": {"scenario": doc_a.path, "value": value_a},
        "b": {"scenario": doc_b.path, "value": value_b},
        "ratio_a_over_b": ratio,
    }
    _write_json(out_dir / "compare.json", report)
    _manifest(out_dir, f"{doc_a.path},{doc_b.path}", "ok", EXIT_OK, {"compare": str(out_dir / "compare.json")})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        doc = load_scenario(args.scenario, _parse_overrides(args.override))
    except BatchingError as err:
        print(f"invalid: {err}", file=sys.stderr)
        return _exit_code_for(err)
    print(f"ok: {doc.path} ({doc.mode} mode, {len(doc.sim.cluster.workers)} workers)")
    if args.echo:
        print(dump_scenario(doc), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynbatch",
        description="Run dynamic-batching cluster scenarios and trainings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-path scenario override, e.g. controller.deadband=0.1",
    )
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run two scenarios and report the metric ratio")
    p_cmp.add_argument("scenario_a")
    p_cmp.add_argument("scenario_b")
    p_cmp.add_argument("--out", default="out-compare")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("scenario")
    p_val.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p_val.add_argument("--echo", action="store_true", help="print the normalized scenario")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
