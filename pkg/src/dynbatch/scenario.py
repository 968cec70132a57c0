"""Scenario file loading, validation, and serialization.

Scenarios are YAML documents validated against a JSON schema before
anything runs; unknown keys are rejected so typos fail loudly. Loading
normalizes every default into the document, which makes serialization a
fixed point: a dumped scenario re-parses to an identical one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from .allocator import CapacityPolicy, VmType
from .controller import ControllerConfig
from .core import (
    ClusterEvent,
    ClusterSpec,
    ConfigError,
    EventKind,
    SyncMode,
    WorkerKind,
    WorkerSpec,
)
from .elasticity import BatchMode, GlobalBatchPolicy
from .perfmodel import PerfParams
from .simkernel import Explicit, Horizon, InitialAlloc, Scenario, Static, Uniform
from .trainer import ModelKind

SCHEMA_VERSION = 1

_WORKER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "cores"],
    "properties": {
        "id": {"type": "string"},
        "cores": {"type": "integer", "minimum": 1},
        "flops": {"type": "number", "exclusiveMinimum": 0},
        "mem_capacity": {"type": "integer", "minimum": 1},
        "kind": {"enum": ["cpu", "gpu"]},
    },
}

_PERF_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "base_rate": {"type": "number", "exclusiveMinimum": 0},
        "amdahl_p": {"type": "number", "minimum": 0, "maximum": 1},
        "b_half": {"type": "integer", "minimum": 0},
        "cpu_decline": {"type": "number", "minimum": 0},
        "gpu_cliff": {"type": "boolean"},
        "noise_sigma": {"type": "number", "minimum": 0},
    },
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "schema_version": {"type": "integer", "enum": [SCHEMA_VERSION]},
        "mode": {"enum": ["sim", "train"]},
        "seed": {"type": "integer", "minimum": 0},
        "cluster": {
            "type": "object",
            "additionalProperties": False,
            "required": ["workers"],
            "properties": {
                "sync": {"enum": ["bsp", "asp"]},
                "workers": {"type": "array", "minItems": 1, "items": _WORKER_SCHEMA},
            },
        },
        "portfolio": {
            "type": "object",
            "additionalProperties": False,
            "required": ["vm_types", "demand_cores"],
            "properties": {
                "vm_types": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name", "cores"],
                        "properties": {
                            "name": {"type": "string"},
                            "cores": {"type": "integer", "minimum": 1},
                            "flops": {"type": "number", "exclusiveMinimum": 0},
                            "cost_rate": {"type": "number", "minimum": 0},
                            "preempt_prob": {"type": "number", "minimum": 0, "maximum": 1},
                            "mem_capacity": {"type": "integer", "minimum": 1},
                            "kind": {"enum": ["cpu", "gpu"]},
                        },
                    },
                },
                "demand_cores": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "minimum": 0},
                "max_per_type": {"type": "integer", "minimum": 1},
                "sync": {"enum": ["bsp", "asp"]},
            },
        },
        "perf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "default": _PERF_SCHEMA,
                "overrides": {
                    "type": "object",
                    "additionalProperties": _PERF_SCHEMA,
                },
            },
        },
        "controller": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "deadband": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "ewma_alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "window": {"type": "integer", "minimum": 1},
                        "conserve_global": {"type": "boolean"},
                        "bounds": {
                            "type": "object",
                            "additionalProperties": {
                                "type": "object",
                                "additionalProperties": False,
                                "properties": {
                                    "min": {"type": "integer", "minimum": 1},
                                    "max": {"type": ["integer", "null"], "minimum": 1},
                                },
                            },
                        },
                    },
                },
            ]
        },
        "allocation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["uniform", "static", "explicit"]},
                "b0": {"type": "integer", "minimum": 1},
                "sizes": {
                    "type": "object",
                    "additionalProperties": {"type": "integer", "minimum": 1},
                },
            },
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["conserving", "scaling"]},
                "monitor_window": {"type": "integer", "minimum": 1},
                "scale_down_trigger": {
                    "type": "number",
                    "exclusiveMinimum": 0,
                    "exclusiveMaximum": 1,
                },
            },
        },
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["at", "kind"],
                "properties": {
                    "at": {"type": "number", "minimum": 0},
                    "kind": {"enum": ["preempt", "deflate", "reinflate", "add"]},
                    "worker": {"type": "string"},
                    "factor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "spec": _WORKER_SCHEMA,
                },
            },
        },
        "restart_cost": {"type": "number", "minimum": 0},
        "sync_cost": {"type": "number", "minimum": 0},
        "checkpoint_every": {"type": "integer", "minimum": 1},
        "capacity_policy": {"enum": ["cores", "flops"]},
        "horizon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iterations": {"type": ["integer", "null"], "minimum": 1},
                "max_seconds": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "trainer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["model", "n", "dim", "eta", "iterations"],
            "properties": {
                "model": {"enum": ["linreg", "logreg"]},
                "n": {"type": "integer", "minimum": 1},
                "dim": {"type": "integer", "minimum": 1},
                "noise_sigma": {"type": "number", "minimum": 0},
                "eta": {"type": "number", "exclusiveMinimum": 0},
                "iterations": {"type": "integer", "minimum": 1},
                "loss_threshold": {"type": ["number", "null"]},
            },
        },
    },
}


@dataclass(frozen=True)
class PortfolioSpec:
    vm_types: tuple[VmType, ...]
    demand_cores: int
    alpha: float = 0.0
    max_per_type: int = 4
    sync: SyncMode = SyncMode.BSP


@dataclass(frozen=True)
class TrainerSpec:
    model: ModelKind
    n: int
    dim: int
    eta: float
    iterations: int
    noise_sigma: float = 0.0
    loss_threshold: float | None = None


@dataclass(frozen=True)
class ScenarioDoc:
    """A fully validated scenario document."""

    mode: str
    sim: Scenario
    trainer: TrainerSpec | None
    portfolio: PortfolioSpec | None
    path: str = ""


def _build_worker(d: dict) -> WorkerSpec:
    return WorkerSpec(
        id=d["id"],
        cores=d["cores"],
        flops=d.get("flops", float(d["cores"])),
        mem_capacity=d.get("mem_capacity", 1 << 20),
        kind=WorkerKind(d.get("kind", "cpu")),
    )


def _worker_dict(w: WorkerSpec) -> dict:
    return {
        "id": w.id,
        "cores": w.cores,
        "flops": w.flops,
        "mem_capacity": w.mem_capacity,
        "kind": w.kind.value,
    }


def _build_perf(d: dict) -> PerfParams:
    return PerfParams(
        base_rate=d.get("base_rate", 1.0),
        amdahl_p=d.get("amdahl_p", 0.95),
        b_half=d.get("b_half", 8),
        cpu_decline=d.get("cpu_decline", 0.002),
        gpu_cliff=d.get("gpu_cliff", True),
        noise_sigma=d.get("noise_sigma", 0.0),
    )


def _perf_dict(p: PerfParams) -> dict:
    return {
        "base_rate": p.base_rate,
        "amdahl_p": p.amdahl_p,
        "b_half": p.b_half,
        "cpu_decline": p.cpu_decline,
        "gpu_cliff": p.gpu_cliff,
        "noise_sigma": p.noise_sigma,
    }


def _build_controller(d: dict | None) -> ControllerConfig | None:
    if d is None:
        return None
    bounds = {}
    for wid, b in d.get("bounds", {}).items():
        bounds[wid] = (b.get("min", 1), b.get("max"))
    return ControllerConfig(
        deadband=d.get("deadband", 0.05),
        ewma_alpha=d.get("ewma_alpha", 0.3),
        window=d.get("window", 20),
        conserve_global=d.get("conserve_global", True),
        bounds=bounds,
    )


def _controller_dict(c: ControllerConfig | None) -> dict | None:
    if c is None:
        return None
    return {
        "deadband": c.deadband,
        "ewma_alpha": c.ewma_alpha,
        "window": c.window,
        "conserve_global": c.conserve_global,
        "bounds": {
            wid: {"min": lo, "max": hi} for wid, (lo, hi) in sorted(c.bounds.items())
        },
    }


def _build_event(d: dict, index: int) -> ClusterEvent:
    kind = EventKind(d["kind"])
    try:
        return ClusterEvent(
            at=float(d["at"]),
            kind=kind,
            worker=d.get("worker"),
            factor=d.get("factor"),
            spec=_build_worker(d["spec"]) if "spec" in d else None,
        )
    except Exception as exc:
        raise ConfigError(f"events[{index}]: {exc}") from exc


def _event_dict(e: ClusterEvent) -> dict:
    out: dict = {"at": e.at, "kind": e.kind.value}
    if e.kind is EventKind.ADD:
        out["spec"] = _worker_dict(e.spec)  # type: ignore[arg-type]
    else:
        out["worker"] = e.worker
    if e.kind is EventKind.DEFLATE:
        out["factor"] = e.factor
    return out


def _build_initial_alloc(d: dict | None) -> InitialAlloc:
    if d is None:
        return Uniform(b0=128)
    kind = d["kind"]
    if kind == "uniform":
        return Uniform(b0=d.get("b0", 128))
    if kind == "static":
        return Static(b0=d.get("b0", 128))
    if "sizes" not in d:
        raise ConfigError("allocation.kind=explicit requires sizes")
    return Explicit(sizes=dict(d["sizes"]))


def _alloc_dict(a: InitialAlloc) -> dict:
    if isinstance(a, Uniform):
        return {"kind": "uniform", "b0": a.b0}
    if isinstance(a, Static):
        return {"kind": "static", "b0": a.b0}
    return {"kind": "explicit", "sizes": dict(a.sizes)}


def build_doc(raw: dict, path: str = "") -> ScenarioDoc:
    """Validate a raw mapping and build the scenario objects."""
    try:
        jsonschema.validate(raw, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path or 'scenario'}: {where}: {exc.message}") from exc

    mode = raw.get("mode", "sim")
    if "cluster" in raw and "portfolio" in raw:
        raise ConfigError(f"{path}: give either cluster or portfolio, not both")
    if "cluster" not in raw and "portfolio" not in raw:
        raise ConfigError(f"{path}: scenario needs a cluster or a portfolio section")

    portfolio = None
    if "portfolio" in raw:
        p = raw["portfolio"]
        vm_types = tuple(
            VmType(
                name=t["name"],
                cores=t["cores"],
                flops=t.get("flops", float(t["cores"])),
                cost_rate=t.get("cost_rate", 0.0),
                preempt_prob=t.get("preempt_prob", 0.0),
                mem_capacity=t.get("mem_capacity", 1 << 20),
                kind=WorkerKind(t.get("kind", "cpu")),
            )
            for t in p["vm_types"]
        )
        portfolio = PortfolioSpec(
            vm_types=vm_types,
            demand_cores=p["demand_cores"],
            alpha=p.get("alpha", 0.0),
            max_per_type=p.get("max_per_type", 4),
            sync=SyncMode(p.get("sync", "bsp")),
        )
        # Cluster and allocation are derived deterministically at run time.
        from .allocator import portfolio_to_allocation, select_portfolio

        chosen = select_portfolio(
            list(vm_types), portfolio.demand_cores, portfolio.alpha, portfolio.max_per_type
        )
        cluster, alloc = portfolio_to_allocation(chosen, list(vm_types), _b0_of(raw))
        cluster = ClusterSpec(cluster.workers, portfolio.sync)
        initial = Explicit(sizes=dict(alloc.sizes))
    else:
        c = raw["cluster"]
        try:
            cluster = ClusterSpec(
                workers=tuple(_build_worker(w) for w in c["workers"]),
                sync_mode=SyncMode(c.get("sync", "bsp")),
            )
        except Exception as exc:
            raise ConfigError(f"{path}: cluster: {exc}") from exc
        initial = _build_initial_alloc(raw.get("allocation"))

    perf_raw = raw.get("perf", {})
    default_perf = _build_perf(perf_raw.get("default", {}))
    overrides = {
        wid: _build_perf(p) for wid, p in perf_raw.get("overrides", {}).items()
    }

    horizon_raw = raw.get("horizon", {})
    if mode == "sim" and not horizon_raw:
        raise ConfigError(f"{path}: sim scenarios need a horizon")
    try:
        horizon = (
            Horizon(
                max_iterations=horizon_raw.get("max_iterations"),
                max_seconds=horizon_raw.get("max_seconds"),
            )
            if horizon_raw
            else Horizon(max_iterations=1)
        )
    except Exception as exc:
        raise ConfigError(f"{path}: horizon: {exc}") from exc

    policy_raw = raw.get("policy", {})
    policy = GlobalBatchPolicy(
        mode=BatchMode(policy_raw.get("mode", "conserving")),
        monitor_window=policy_raw.get("monitor_window", 20),
        scale_down_trigger=policy_raw.get("scale_down_trigger", 0.1),
    )

    events = tuple(_build_event(e, i) for i, e in enumerate(raw.get("events", [])))

    try:
        sim = Scenario(
            cluster=cluster,
            initial_alloc=initial,
            horizon=horizon,
            controller=_build_controller(raw.get("controller", {})),
            perf=overrides,
            default_perf=default_perf,
            policy=policy,
            events=events,
            restart_cost=raw.get("restart_cost", 60.0),
            sync_cost=raw.get("sync_cost", 0.0),
            checkpoint_every=raw.get("checkpoint_every", 100),
            capacity_policy=(
                CapacityPolicy(raw["capacity_policy"]) if "capacity_policy" in raw else None
            ),
            seed=raw["seed"],
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    trainer = None
    if mode == "train":
        if "trainer" not in raw:
            raise ConfigError(f"{path}: train scenarios need a trainer section")
        t = raw["trainer"]
        trainer = TrainerSpec(
            model=ModelKind(t["model"]),
            n=t["n"],
            dim=t["dim"],
            eta=t["eta"],
            iterations=t["iterations"],
            noise_sigma=t.get("noise_sigma", 0.0),
            loss_threshold=t.get("loss_threshold"),
        )
    return ScenarioDoc(mode=mode, sim=sim, trainer=trainer, portfolio=portfolio, path=path)


def _b0_of(raw: dict) -> int:
    alloc = raw.get("allocation", {})
    return alloc.get("b0", 128)


def doc_to_dict(doc: ScenarioDoc) -> dict:
    """Normalized mapping; loading it back yields an identical document."""
    sim = doc.sim
    out: dict = {
        "schema_version": SCHEMA_VERSION,
        "mode": doc.mode,
        "seed": sim.seed,
    }
    if doc.portfolio is not None:
        p = doc.portfolio
        out["portfolio"] = {
            "vm_types": [
                {
                    "name": t.name,
                    "cores": t.cores,
                    "flops": t.flops,
                    "cost_rate": t.cost_rate,
                    "preempt_prob": t.preempt_prob,
                    "mem_capacity": t.mem_capacity,
                    "kind": t.kind.value,
                }
                for t in p.vm_types
            ],
            "demand_cores": p.demand_cores,
            "alpha": p.alpha,
            "max_per_type": p.max_per_type,
            "sync": p.sync.value,
        }
        out["allocation"] = {"kind": "uniform", "b0": _b0_from_doc(doc)}
    else:
        out["cluster"] = {
            "sync": sim.cluster.sync_mode.value,
            "workers": [_worker_dict(w) for w in sim.cluster.workers],
        }
        out["allocation"] = _alloc_dict(sim.initial_alloc)
    out["perf"] = {
        "default": _perf_dict(sim.default_perf),
        "overrides": {wid: _perf_dict(p) for wid, p in sorted(sim.perf.items())},
    }
    out["controller"] = _controller_dict(sim.controller)
    out["policy"] = {
        "mode": sim.policy.mode.value,
        "monitor_window": sim.policy.monitor_window,
        "scale_down_trigger": sim.policy.scale_down_trigger,
    }
    out["events"] = [_event_dict(e) for e in sim.events]
    out["restart_cost"] = sim.restart_cost
    out["sync_cost"] = sim.sync_cost
    out["checkpoint_every"] = sim.checkpoint_every
    if sim.capacity_policy is not None:
        out["capacity_policy"] = sim.capacity_policy.value
    out["horizon"] = {
        "max_iterations": sim.horizon.max_iterations,
        "max_seconds": sim.horizon.max_seconds,
    }
    if doc.trainer is not None:
        t = doc.trainer
        out["trainer"] = {
            "model": t.model.value,
            "n": t.n,
            "dim": t.dim,
            "noise_sigma": t.noise_sigma,
            "eta": t.eta,
            "iterations": t.iterations,
            "loss_threshold": t.loss_threshold,
        }
    return out


def _b0_from_doc(doc: ScenarioDoc) -> int:
    init = doc.sim.initial_alloc
    if isinstance(init, (Uniform, Static)):
        return init.b0
    sizes = init.sizes
    return max(1, round(sum(sizes.values()) / len(sizes)))


def load_scenario(path: str | Path, overrides: dict | None = None) -> ScenarioDoc:
    """Parse, override, validate, and build a scenario file."""
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {p}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: scenario must be a mapping")
    for key, value in (overrides or {}).items():
        _apply_override(raw, key, value)
    return build_doc(raw, path=str(p))


def _apply_override(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {part!r} is not a mapping")
        node = node.setdefault(part, {})
    if not isinstance(node, dict):
        raise ConfigError(f"override {dotted!r} does not address a mapping")
    node[parts[-1]] = value


def dump_scenario(doc: ScenarioDoc) -> str:
    return yaml.safe_dump(doc_to_dict(doc), sort_keys=False)
