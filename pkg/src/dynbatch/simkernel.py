"""Deterministic event-driven simulation of heterogeneous data-parallel
training with elasticity events, restart overheads, and full tracing.

BSP rounds advance the clock by the slowest worker's gradient time plus a
sync cost; the batch controller runs after each round on its cadence and
every adopted readjustment (or cluster membership change) charges a
kill-restart penalty. Scripted events fire at iteration boundaries; a BSP
preemption additionally loses the in-flight round and rewinds to the last
checkpoint. ASP workers iterate independently on a shared virtual clock
using an earliest-completion-first queue (worker id breaks ties), each
commit bumping a global model version; a commit's staleness is the number
of versions that landed between its fetch and its commit.

Runs are fully deterministic given the scenario seed: the only randomness
is optional lognormal iteration-time noise drawn from one seeded
generator in a fixed order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

from . import elasticity
from .allocator import (
    CapacityPolicy,
    capacity_estimate,
    effective_policy,
    static_allocation_for_cluster,
)
from .controller import (
    ControllerConfig,
    ControllerState,
    Decision,
    clamp_bounds,
    controller_step,
    ewma_update,
    record_measurements,
    run_adjustment_check,
    set_bmax,
)
from .core import (
    BatchAllocation,
    ClusterEvent,
    ClusterExhaustedError,
    ClusterSpec,
    EventKind,
    InvalidEventError,
    InvalidInputError,
    InvalidModeError,
    IterationTrace,
    MemoryLimitExceededError,
    SyncMode,
    WorkerSpec,
)
from .elasticity import Action, BatchMode, GlobalBatchPolicy
from .perfmodel import PerfParams, iteration_time

logger = logging.getLogger(__name__)

RecordSink = Callable[[dict], None]


@dataclass(frozen=True)
class Uniform:
    """Every worker starts with the same mini-batch ``b0``."""

    b0: int


@dataclass(frozen=True)
class Static:
    """Capacity-proportional start with per-worker average ``b0``."""

    b0: int


@dataclass(frozen=True)
class Explicit:
    sizes: dict[str, int]


InitialAlloc = Union[Uniform, Static, Explicit]


@dataclass(frozen=True)
class Horizon:
    max_iterations: int | None = None
    max_seconds: float | None = None

    def __post_init__(self) -> None:
        if self.max_iterations is None and self.max_seconds is None:
            raise InvalidInputError("horizon needs max_iterations or max_seconds")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be >= 1")
        if self.max_seconds is not None and not (self.max_seconds > 0):
            raise InvalidInputError("max_seconds must be > 0")


@dataclass(frozen=True)
class Scenario:
    """Everything needed for one reproducible simulation run."""

    cluster: ClusterSpec
    initial_alloc: InitialAlloc
    horizon: Horizon
    controller: ControllerConfig | None = field(default_factory=ControllerConfig)
    perf: dict[str, PerfParams] = field(default_factory=dict)
    default_perf: PerfParams = field(default_factory=PerfParams)
    policy: GlobalBatchPolicy = field(default_factory=GlobalBatchPolicy)
    events: tuple[ClusterEvent, ...] = ()
    restart_cost: float = 60.0
    sync_cost: float = 0.0
    checkpoint_every: int = 100
    capacity_policy: CapacityPolicy | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.restart_cost < 0 or self.sync_cost < 0:
            raise InvalidInputError("restart_cost and sync_cost must be >= 0")
        if self.checkpoint_every < 1:
            raise InvalidInputError("checkpoint_every must be >= 1")
        object.__setattr__(
            self, "events", tuple(sorted(self.events, key=lambda e: e.at))
        )

    def perf_for(self, worker_id: str) -> PerfParams:
        return self.perf.get(worker_id, self.default_perf)


@dataclass
class SimResult:
    mode: SyncMode
    traces: list[IterationTrace]
    actions: list[Action]
    total_time: float
    compute_time: float
    overhead_time: float
    idle_time: float
    adjustments: int
    final_alloc: BatchAllocation
    iterations: int
    staleness_histogram: dict[str, dict[int, int]] = field(default_factory=dict)
    rewound_iterations: int = 0

    @property
    def overhead_fraction(self) -> float:
        return self.overhead_time / self.total_time if self.total_time > 0 else 0.0

    def summary_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "iterations": self.iterations,
            "total_time": self.total_time,
            "compute_time": self.compute_time,
            "overhead_time": self.overhead_time,
            "idle_time": self.idle_time,
            "overhead_fraction": self.overhead_fraction,
            "adjustments": self.adjustments,
            "rewound_iterations": self.rewound_iterations,
            "final_allocation": self.final_alloc.as_dict(),
            "staleness_histogram": {
                w: dict(sorted(h.items())) for w, h in sorted(self.staleness_histogram.items())
            },
            "adjustment_log": [
                {
                    "iteration": row.iteration,
                    "allocation": row.allocation.as_dict(),
                }
                for row in self.traces
                if row.adjustment_made
            ],
        }


def overhead_report(result: SimResult) -> tuple[int, float]:
    """Adjustment count and the exact restart-seconds share of the run."""
    return result.adjustments, result.overhead_fraction


@dataclass(frozen=True)
class StalenessStats:
    mean: dict[str, float]
    histogram: dict[str, dict[int, int]]

    @property
    def max_mean(self) -> float:
        return max(self.mean.values())


def staleness_stats(result: SimResult) -> StalenessStats:
    """Per-worker staleness distribution of an ASP run."""
    if result.mode is not SyncMode.ASP:
        raise InvalidModeError("staleness statistics require an ASP result")
    totals: dict[str, int] = {}
    counts: dict[str, int] = {}
    for w, hist in result.staleness_histogram.items():
        counts[w] = sum(hist.values())
        totals[w] = sum(s * n for s, n in hist.items())
    mean = {w: totals[w] / counts[w] for w in totals if counts[w] > 0}
    return StalenessStats(mean=mean, histogram=result.staleness_histogram)


def build_initial_allocation(scenario: Scenario) -> BatchAllocation:
    init = scenario.initial_alloc
    ids = list(scenario.cluster.ids)
    if isinstance(init, Uniform):
        if init.b0 < 1:
            raise InvalidInputError("uniform b0 must be >= 1")
        return BatchAllocation({w: init.b0 for w in ids})
    if isinstance(init, Static):
        return static_allocation_for_cluster(
            scenario.cluster, init.b0, scenario.capacity_policy
        )
    if set(init.sizes) != set(ids):
        raise InvalidInputError(
            f"explicit allocation ids {sorted(init.sizes)} do not match cluster {sorted(ids)}"
        )
    return BatchAllocation({w: init.sizes[w] for w in ids})


class _Run:
    """Mutable machinery shared by the BSP and ASP loops."""

    def __init__(self, scenario: Scenario, on_record: RecordSink | None):
        self.sc = scenario
        self.on_record = on_record
        self.rng = np.random.default_rng(scenario.seed)
        self.live: dict[str, WorkerSpec] = {w.id: w for w in scenario.cluster.workers}
        self.deflation: dict[str, float] = {w: 1.0 for w in self.live}
        self.alloc = build_initial_allocation(scenario)
        self.ctrl: ControllerState | None = None
        if scenario.controller is not None:
            self.ctrl = ControllerState.initial(self.alloc, scenario.controller)
            clamped, _ = clamp_bounds(
                self.alloc, self.ctrl.bounds, conserve_total=self.alloc.global_size
            )
            if clamped.sizes != self.alloc.sizes:
                self.alloc = clamped
                self.ctrl.current = clamped
        self.b_target = self.alloc.global_size
        self.ref_capacity = self._live_capacity()
        self.now = 0.0
        self.iteration = 0
        self.traces: list[IterationTrace] = []
        self.actions: list[Action] = []
        self.overhead = 0.0
        self.compute = 0.0
        self.idle = 0.0
        self.adjustments = 0
        self.rewound = 0
        self.pending_overhead = 0.0
        self.force_check = False
        self.event_idx = 0
        self.staleness_hist: dict[str, dict[int, int]] = {}
        self.monitor: dict | None = None

    # -- shared helpers ------------------------------------------------

    def _live_capacity(self) -> float:
        pol = effective_policy(
            ClusterSpec(tuple(self.live.values()), self.sc.cluster.sync_mode),
            self.sc.capacity_policy,
        )
        return sum(
            capacity_estimate(w, pol) * self.deflation[w.id] for w in self.live.values()
        )

    def _live_cluster(self) -> ClusterSpec:
        return ClusterSpec(tuple(self.live.values()), self.sc.cluster.sync_mode)

    def _deadband(self) -> float:
        return self.sc.controller.deadband if self.sc.controller else 0.05

    def _bounds(self):
        return self.ctrl.bounds if self.ctrl else None

    def _emit(self, row: IterationTrace) -> None:
        self.traces.append(row)
        if self.on_record:
            self.on_record(row.as_dict())

    def _emit_action(self, action: Action) -> None:
        self.actions.append(action)
        if self.on_record:
            self.on_record(action.as_dict())

    def _set_alloc(self, alloc: BatchAllocation, adopted: bool) -> None:
        self.alloc = alloc
        if self.ctrl is not None:
            if adopted:
                self.ctrl.adopt(alloc, self.iteration)
            else:
                self.ctrl.current = alloc
                self.ctrl.reset_window()
                self.ctrl.last_check_iter = self.iteration
        if adopted:
            self.adjustments += 1

    def _charge_restart(self) -> None:
        self.now += self.sc.restart_cost
        self.overhead += self.sc.restart_cost
        self.pending_overhead += self.sc.restart_cost

    def _noisy_time(self, wid: str, batch: int) -> float:
        spec = self.live[wid]
        params = self.sc.perf_for(wid)
        t = iteration_time(spec, params, batch, self.deflation[wid])
        if params.noise_sigma > 0:
            t *= float(self.rng.lognormal(0.0, params.noise_sigma))
        return t

    def _clamp_oom(self, wid: str) -> None:
        # Changing any worker's batch means a kill-restart, controller or
        # not; the device cap also becomes that worker's permanent b_max.
        cap = self.live[wid].mem_capacity
        logger.warning("worker %s out of memory; clamping batch to %d", wid, cap)
        new_alloc = self.alloc.replace(**{wid: cap})
        if self.ctrl is not None:
            set_bmax(self.ctrl, wid, cap)
        self._set_alloc(new_alloc, adopted=True)
        self._charge_restart()
        self.force_check = True
        self._emit_action(
            Action(
                event_id=f"oom-{len(self.actions)}",
                kind="oom",
                worker=wid,
                allocation=new_alloc,
                b_target=self.b_target,
                adjusted=True,
                restart=True,
                note=f"batch clamped to memory capacity {cap}",
            )
        )
        self._arm_monitor()

    def _arm_monitor(self) -> None:
        # Scale-down monitoring compares BSP iteration rows around the
        # readjustment; only armed under the conserving policy.
        if self.sc.policy.mode is not BatchMode.CONSERVING:
            return
        if self.sc.cluster.sync_mode is not SyncMode.BSP:
            return
        window = self.sc.policy.monitor_window
        self.monitor = {
            "before": list(self.traces[-window:]),
            "after_start": len(self.traces),
        }

    def _check_monitor(self) -> None:
        if self.monitor is None:
            return
        window = self.sc.policy.monitor_window
        after = self.traces[self.monitor["after_start"]:]
        if len(after) < window:
            return
        availability = self._live_capacity() / self.ref_capacity if self.ref_capacity else 1.0
        new_target = elasticity.monitor_and_scale_down(
            self.monitor["before"], after[:window], self.sc.policy, self.b_target, availability
        )
        self.monitor = None
        if new_target is not None and new_target != self.b_target:
            logger.info("throughput drop: scaling global batch %d -> %d", self.b_target, new_target)
            self.b_target = new_target
            self.ref_capacity = self._live_capacity()
            if self.ctrl is not None:
                self.ctrl.b_target = new_target
            self.force_check = True
            self._emit_action(
                Action(
                    event_id=f"monitor-{len(self.actions)}",
                    kind="scale_down",
                    worker=None,
                    allocation=self.alloc,
                    b_target=new_target,
                    adjusted=False,
                    restart=False,
                    note="global batch scaled to resource availability",
                )
            )

    # -- event application ----------------------------------------------

    def _pending_events(self) -> list[tuple[int, ClusterEvent]]:
        return [
            (i, e) for i, e in enumerate(self.sc.events) if i >= self.event_idx
        ]

    def _next_event(self) -> ClusterEvent | None:
        if self.event_idx < len(self.sc.events):
            return self.sc.events[self.event_idx]
        return None

    def _apply_event(self, event: ClusterEvent) -> Action:
        event_id = f"evt-{self.event_idx}"
        self.event_idx += 1
        kind = event.kind
        if kind is EventKind.PREEMPT:
            action = elasticity.on_preemption(
                event,
                self.alloc,
                self._live_cluster(),
                self.sc.cluster.sync_mode,
                self.sc.policy,
                self.b_target,
                deadband=self._deadband(),
                bounds=self._bounds(),
                event_id=event_id,
            )
            self.live.pop(event.target)
            self.deflation.pop(event.target, None)
            if self.ctrl is not None:
                self.ctrl.remove_worker(event.target)
            self._set_alloc(action.allocation, adopted=action.adjusted)
            self.b_target = action.b_target
            if self.ctrl is not None:
                self.ctrl.b_target = action.b_target
            if action.restart:
                self._charge_restart()
            if action.rewind:
                checkpoint = (self.iteration // self.sc.checkpoint_every) * self.sc.checkpoint_every
                self.rewound += self.iteration - checkpoint
                self.iteration = checkpoint
                if self.ctrl is not None:
                    self.ctrl.last_adjust_iter = min(self.ctrl.last_adjust_iter, checkpoint)
                    self.ctrl.last_check_iter = min(self.ctrl.last_check_iter, checkpoint)
            if action.adjusted and self.sc.policy.mode is BatchMode.CONSERVING:
                self._arm_monitor()
            if self.sc.policy.mode is BatchMode.SCALING:
                self.ref_capacity = self._live_capacity()
        elif kind in (EventKind.DEFLATE, EventKind.REINFLATE):
            action = elasticity.on_deflation(event, self.alloc, self.b_target, event_id=event_id)
            self.deflation[event.target] = (
                event.factor if kind is EventKind.DEFLATE else 1.0
            )
            if self.ctrl is not None:
                self.ctrl.reset_window()
            self.force_check = True
        else:  # ADD
            spec = event.spec
            assert spec is not None
            if spec.id in self.live:
                raise InvalidEventError(f"added worker {spec.id!r} already present")
            self.live[spec.id] = spec
            self.deflation[spec.id] = 1.0
            action = elasticity.on_addition(
                event,
                self.alloc,
                self._live_cluster(),
                self.sc.policy,
                self.b_target,
                capacity_policy=self.sc.capacity_policy,
                bounds=self._bounds(),
                event_id=event_id,
            )
            if self.ctrl is not None:
                cfg = self.sc.controller
                assert cfg is not None
                self.ctrl.admit_worker(spec.id, cfg.bounds.get(spec.id, (1, None)))
            self._set_alloc(action.allocation, adopted=True)
            self.b_target = action.b_target
            if self.ctrl is not None:
                self.ctrl.b_target = action.b_target
            self._charge_restart()
            if self.sc.policy.mode is BatchMode.SCALING:
                self.ref_capacity = self._live_capacity()
        self._emit_action(action)
        return action

    def _result(self, mode: SyncMode) -> SimResult:
        return SimResult(
            mode=mode,
            traces=self.traces,
            actions=self.actions,
            total_time=self.now,
            compute_time=self.compute,
            overhead_time=self.overhead,
            idle_time=self.idle,
            adjustments=self.adjustments,
            final_alloc=self.alloc,
            iterations=self.iteration,
            staleness_histogram=self.staleness_hist,
            rewound_iterations=self.rewound,
        )

    def _exhausted(self, mode: SyncMode) -> ClusterExhaustedError:
        err = ClusterExhaustedError(
            f"all workers preempted at t={self.now:.3f}s, iteration {self.iteration}"
        )
        err.partial_result = self._result(mode)  # type: ignore[attr-defined]
        return err


def _simulate_bsp(run: _Run) -> SimResult:
    sc = run.sc
    hz = sc.horizon
    while True:
        while (ev := run._next_event()) is not None and ev.at <= run.now:
            try:
                run._apply_event(ev)
            except ClusterExhaustedError as err:
                err.partial_result = run._result(SyncMode.BSP)  # type: ignore[attr-defined]
                raise
        if hz.max_iterations is not None and run.iteration >= hz.max_iterations:
            break
        if hz.max_seconds is not None and run.now >= hz.max_seconds:
            break
        if not run.live:
            raise run._exhausted(SyncMode.BSP)
        times: dict[str, float] = {}
        for wid in run.live:
            try:
                times[wid] = run._noisy_time(wid, run.alloc[wid])
            except MemoryLimitExceededError:
                run._clamp_oom(wid)
                times[wid] = run._noisy_time(wid, run.alloc[wid])
        span = max(times.values()) + sc.sync_cost
        # A preemption strictly inside the round loses the work in flight.
        preempts = [
            e
            for _, e in run._pending_events()
            if e.kind is EventKind.PREEMPT and run.now < e.at < run.now + span
        ]
        if preempts:
            cut = min(p.at for p in preempts)
            run.idle += cut - run.now
            run.now = cut
            continue
        run.now += span
        run.compute += span
        run.iteration += 1
        row = IterationTrace(
            iteration=run.iteration,
            per_worker_time=times,
            makespan=span,
            allocation=run.alloc,
            time=run.now,
            staleness={},
        )
        adjusted = False
        if run.ctrl is not None:
            assert sc.controller is not None
            decision = controller_step(run.ctrl, row, sc.controller, force=run.force_check)
            run.force_check = False
            if decision is Decision.ADJUST:
                adjusted = True
                run.adjustments += 1
                run.alloc = run.ctrl.current
                run._charge_restart()
        overhead_now = run.pending_overhead
        run.pending_overhead = 0.0
        run._emit(
            replace(row, adjustment_made=adjusted, overhead_seconds=overhead_now, time=run.now)
        )
        run._check_monitor()
    return run._result(SyncMode.BSP)


def _simulate_asp(run: _Run) -> SimResult:
    sc = run.sc
    hz = sc.horizon
    cfg = sc.controller
    version = 0
    last_check_version = 0
    # worker id -> (completion time, duration, version read at fetch)
    in_flight: dict[str, tuple[float, float, int]] = {}

    def fetch(wid: str, at: float) -> None:
        try:
            dur = run._noisy_time(wid, run.alloc[wid])
        except MemoryLimitExceededError:
            run._clamp_oom(wid)
            dur = run._noisy_time(wid, run.alloc[wid])
        in_flight[wid] = (at + dur, dur, version)

    def restart_all(at: float) -> None:
        in_flight.clear()
        for w in run.live:
            fetch(w, at)

    for w in run.live:
        fetch(w, 0.0)

    while True:
        if hz.max_iterations is not None and run.iteration >= hz.max_iterations:
            break
        if not run.live or not in_flight:
            raise run._exhausted(SyncMode.ASP)
        next_ev = run._next_event()
        next_commit = min(in_flight.items(), key=lambda kv: (kv[1][0], kv[0]))
        commit_time = next_commit[1][0]
        # Events at the same instant as a commit fire first.
        upcoming = next_ev.at if next_ev is not None and next_ev.at <= commit_time else commit_time
        if hz.max_seconds is not None and upcoming >= hz.max_seconds:
            break
        if next_ev is not None and next_ev.at <= commit_time:
            run.now = max(run.now, next_ev.at)
            try:
                action = run._apply_event(next_ev)
            except ClusterExhaustedError as err:
                err.partial_result = run._result(SyncMode.ASP)  # type: ignore[attr-defined]
                raise
            if next_ev.kind is EventKind.PREEMPT:
                in_flight.pop(next_ev.target, None)
            if action.restart:
                restart_all(run.now)
            continue
        wid = next_commit[0]
        _, duration, read_version = in_flight.pop(wid)
        run.now = commit_time
        staleness = version - read_version
        version += 1
        run.iteration = version
        run.compute += duration
        run.staleness_hist.setdefault(wid, {}).setdefault(staleness, 0)
        run.staleness_hist[wid][staleness] += 1
        row = IterationTrace(
            iteration=version,
            per_worker_time={wid: duration},
            makespan=duration,
            allocation=run.alloc,
            time=run.now,
            staleness={wid: staleness},
        )
        adjusted = False
        if run.ctrl is not None and cfg is not None:
            ewma_update(run.ctrl, {wid: duration}, cfg.ewma_alpha)
            record_measurements(run.ctrl, {wid: duration})
            all_sampled = all(w in run.ctrl.ewma_times for w in run.live)
            due = version - last_check_version >= cfg.window
            if all_sampled and len(run.live) > 1 and (due or run.force_check):
                run.force_check = False
                last_check_version = version
                decision = run_adjustment_check(run.ctrl, cfg, version)
                if decision is Decision.ADJUST:
                    adjusted = True
                    run.adjustments += 1
                    run.alloc = run.ctrl.current
                    run._charge_restart()
        overhead_now = run.pending_overhead
        run.pending_overhead = 0.0
        run._emit(
            replace(row, adjustment_made=adjusted, overhead_seconds=overhead_now)
        )
        if adjusted:
            restart_all(run.now)
        else:
            fetch(wid, run.now)
    return run._result(SyncMode.ASP)


def simulate(scenario: Scenario, on_record: RecordSink | None = None) -> SimResult:
    """Run one scenario to its horizon and return the full result.

    ``on_record`` receives every trace row and action as a dict as soon
    as it exists, so partial output survives mid-run errors.
    """
    run = _Run(scenario, on_record)
    if scenario.cluster.sync_mode is SyncMode.BSP:
        return _simulate_bsp(run)
    return _simulate_asp(run)


def asp_commit_schedule(result: SimResult) -> list[tuple[str, int]]:
    """(worker, staleness) pairs in commit order, for trainer replay."""
    if result.mode is not SyncMode.ASP:
        raise InvalidModeError("commit schedules come from ASP results")
    out = []
    for row in result.traces:
        for wid, s in row.staleness.items():
            out.append((wid, s))
    return out
