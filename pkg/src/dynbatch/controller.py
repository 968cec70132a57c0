"""Closed-loop mini-batch controller.

Each check runs four steps in order: smooth the measured per-worker
iteration times with an EWMA, propose new batch sizes with a proportional
rule that pushes every worker toward the cluster-average iteration time,
clamp the proposal into per-worker bounds, and finally apply a dead-band
so near-no-op changes are held. Adopted allocations are renormalized to a
fixed global batch by default.

The proportional rule scales each worker's batch by (average time /
worker's smoothed time), which equals adding the batch-size correction
``-throughput * (time - average)``. Without renormalization the rule
alone drifts the global batch, so proposals are rescaled to the target
global size before rounding; the raw rule is available by turning
``conserve_global`` off.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

from .allocator import integer_shares
from .core import (
    BatchAllocation,
    InvalidInputError,
    InvalidMeasurementError,
    InvalidStateError,
    IterationTrace,
)

logger = logging.getLogger(__name__)

Bounds = dict[str, tuple[int, int | None]]


class Decision(enum.Enum):
    ADJUST = "adjust"
    HOLD = "hold"


@dataclass(frozen=True)
class ControllerConfig:
    """Stability knobs for the batch-size control loop.

    ``deadband`` is the relative change any worker must exceed before an
    adjustment is adopted (0 disables dead-banding); ``window`` is the
    minimum number of iterations between adjustment checks; ``bounds``
    maps worker ids to (min, max) batch limits, max None meaning
    unbounded. ``bmax_drop_trigger`` is the relative throughput loss a
    worker must show after a batch increase before its upper bound is
    tightened automatically; measurement noise sits well below it.
    """

    deadband: float = 0.05
    ewma_alpha: float = 0.3
    window: int = 20
    conserve_global: bool = True
    bounds: Bounds = field(default_factory=dict)
    bmax_drop_trigger: float = 0.05

    def __post_init__(self) -> None:
        if not (0.0 <= self.deadband < 1.0):
            raise InvalidInputError(f"deadband must be in [0, 1), got {self.deadband}")
        if not (0.0 < self.ewma_alpha <= 1.0):
            raise InvalidInputError(f"ewma_alpha must be in (0, 1], got {self.ewma_alpha}")
        if self.window < 1:
            raise InvalidInputError(f"window must be >= 1, got {self.window}")
        if self.bmax_drop_trigger < 0:
            raise InvalidInputError("bmax_drop_trigger must be >= 0")
        for wid, (lo, hi) in self.bounds.items():
            if lo < 1 or (hi is not None and hi < lo):
                raise InvalidInputError(f"bounds for {wid!r} must satisfy 1 <= min <= max")


@dataclass(frozen=True)
class AdjustmentRecord:
    iteration: int
    old: BatchAllocation
    new: BatchAllocation


@dataclass
class ControllerState:
    """Mutable loop state owned by a single control thread.

    The EWMA accumulators and the throughput window reset at every
    adjustment (and at externally signalled regime changes), so smoothing
    always covers the interval since the allocation last changed. Bounds
    start from the config and may only tighten during a run.
    """

    current: BatchAllocation
    b_target: int
    bounds: Bounds
    ewma_times: dict[str, float] = field(default_factory=dict)
    window_thpt: dict[str, list[float]] = field(default_factory=dict)
    last_adjust_iter: int = 0
    last_check_iter: int = 0
    throughput_history: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    adjustments: list[AdjustmentRecord] = field(default_factory=list)
    pending_bmax: list[tuple[str, int, float]] = field(default_factory=list)
    conservation_abandoned: int = 0

    @classmethod
    def initial(cls, alloc: BatchAllocation, config: ControllerConfig) -> "ControllerState":
        bounds: Bounds = {w: config.bounds.get(w, (1, None)) for w in alloc.sizes}
        return cls(current=alloc, b_target=alloc.global_size, bounds=bounds)

    def bounds_for(self, worker_id: str) -> tuple[int, int | None]:
        return self.bounds.get(worker_id, (1, None))

    def reset_window(self) -> None:
        """Discard smoothed times, e.g. after a resource regime change."""
        self.ewma_times.clear()
        self.window_thpt.clear()

    def adopt(self, new: BatchAllocation, iteration: int) -> None:
        self.adjustments.append(AdjustmentRecord(iteration, self.current, new))
        self.current = new
        self.last_adjust_iter = iteration
        self.last_check_iter = iteration
        self.reset_window()

    def remove_worker(self, worker_id: str) -> None:
        self.current = self.current.without(worker_id)
        self.ewma_times.pop(worker_id, None)
        self.window_thpt.pop(worker_id, None)
        self.pending_bmax = [p for p in self.pending_bmax if p[0] != worker_id]

    def admit_worker(self, worker_id: str, bounds: tuple[int, int | None] = (1, None)) -> None:
        if worker_id in self.bounds:
            raise InvalidInputError(f"worker {worker_id!r} already tracked")
        self.bounds[worker_id] = bounds


def ewma_update(
    state: ControllerState, per_worker_time: dict[str, float], alpha: float
) -> dict[str, float]:
    """Fold one round of measured times into the smoothed estimates.

    The first sample after a window reset is taken as-is.
    """
    for wid, t in per_worker_time.items():
        if not (t > 0) or not math.isfinite(t):
            raise InvalidMeasurementError(f"iteration time for {wid!r} must be positive, got {t}")
        prev = state.ewma_times.get(wid)
        state.ewma_times[wid] = t if prev is None else alpha * t + (1.0 - alpha) * prev
    return dict(state.ewma_times)


def propose_batches(state: ControllerState, config: ControllerConfig) -> BatchAllocation:
    """Proportional update of every live worker's batch from smoothed times.

    Raw proposal: batch * (mean smoothed time / worker's smoothed time).
    With ``conserve_global`` the proposals are rescaled to the target
    global batch before largest-remainder rounding.
    """
    workers = list(state.current.sizes)
    missing = [w for w in workers if w not in state.ewma_times]
    if missing:
        raise InvalidStateError(f"no smoothed times for workers {missing}")
    smoothed = {w: state.ewma_times[w] for w in workers}
    if any(mu <= 0 for mu in smoothed.values()):
        raise InvalidStateError(f"smoothed times must be positive, got {smoothed}")
    mean_time = sum(smoothed.values()) / len(workers)
    raw = [state.current[w] * mean_time / smoothed[w] for w in workers]
    if config.conserve_global:
        scale = state.b_target / sum(raw)
        raw = [r * scale for r in raw]
        sizes = integer_shares(raw, state.b_target, minimum=1)
    else:
        sizes = [max(1, int(round(r))) for r in raw]
    return BatchAllocation(dict(zip(workers, sizes)))


def clamp_bounds(
    proposal: BatchAllocation,
    bounds: Bounds,
    conserve_total: int | None = None,
) -> tuple[BatchAllocation, bool]:
    """Clamp a proposal into per-worker bounds.

    When ``conserve_total`` is given, the residual created by clamping is
    redistributed proportionally among unclamped workers, iterating until
    a fixed point. Returns the clamped allocation and whether the total
    was conserved (trivially True when no target was given).
    """

    def limit(wid: str, value: int) -> int:
        lo, hi = bounds.get(wid, (1, None))
        v = max(lo, value)
        return v if hi is None else min(v, hi)

    workers = list(proposal.sizes)
    values = {w: proposal[w] for w in workers}
    if conserve_total is None:
        return BatchAllocation({w: limit(w, values[w]) for w in workers}), True

    pinned: dict[str, int] = {}
    free = dict(values)
    for _ in range(len(workers) + 1):
        newly = {w: limit(w, v) for w, v in free.items() if limit(w, v) != v}
        pinned.update(newly)
        free = {w: v for w, v in free.items() if w not in newly}
        if not free:
            break
        budget = conserve_total - sum(pinned.values())
        if budget < len(free):
            # Bounds force more batch than the target can hold; pin the
            # remaining workers at their minimum and stop conserving.
            pinned.update({w: limit(w, 1) for w in free})
            free = {}
            break
        share = sum(values[w] for w in free)
        targets = [budget * values[w] / share for w in free]
        redistributed = integer_shares(targets, budget, minimum=1)
        candidate = dict(zip(free, redistributed))
        if all(limit(w, v) == v for w, v in candidate.items()):
            final = {w: (pinned[w] if w in pinned else candidate[w]) for w in workers}
            return BatchAllocation(final), True
        free = candidate
    final = {w: pinned.get(w, limit(w, free.get(w, values[w]))) for w in workers}
    result = BatchAllocation(final)
    conserved = result.global_size == conserve_total
    if not conserved:
        logger.warning(
            "bound saturation: global batch %d instead of target %d",
            result.global_size,
            conserve_total,
        )
    return result, conserved


def deadband_check(
    old: BatchAllocation, proposed: BatchAllocation, deadband: float
) -> Decision:
    """Adjust only if some worker's relative batch change exceeds the band."""
    if set(old.sizes) != set(proposed.sizes):
        raise InvalidInputError("deadband_check requires identical worker sets")
    worst = max(abs(proposed[w] - old[w]) / old[w] for w in old.sizes)
    return Decision.ADJUST if worst > deadband else Decision.HOLD


def update_bmax_on_drop(
    state: ControllerState,
    worker_id: str,
    old_batch: int,
    new_batch: int,
    old_thpt: float,
    new_thpt: float,
) -> bool:
    """Tighten a worker's upper bound when a batch increase hurt it.

    Applies only to increases (a shrink is a no-op regardless of the
    throughput change); once tightened the bound is permanent for the
    run. Returns whether the bound changed.
    """
    if new_batch <= old_batch:
        return False
    if new_thpt >= old_thpt:
        return False
    lo, hi = state.bounds_for(worker_id)
    new_hi = old_batch if hi is None else min(hi, old_batch)
    state.bounds[worker_id] = (min(lo, new_hi), new_hi)
    logger.info(
        "throughput drop on %s (%.3f -> %.3f at batch %d -> %d): b_max := %d",
        worker_id, old_thpt, new_thpt, old_batch, new_batch, new_hi,
    )
    return True


def set_bmax(state: ControllerState, worker_id: str, b_max: int) -> None:
    """Hard-cap a worker's batch, e.g. after a device out-of-memory signal."""
    lo, hi = state.bounds_for(worker_id)
    new_hi = b_max if hi is None else min(hi, b_max)
    state.bounds[worker_id] = (min(lo, new_hi), new_hi)


def record_measurements(state: ControllerState, per_worker_time: dict[str, float]) -> None:
    """Log observed throughput (batch / time) for bound-tightening checks."""
    for wid, t in per_worker_time.items():
        if wid not in state.current.sizes:
            continue
        batch = state.current[wid]
        thpt = batch / t
        state.throughput_history.setdefault(wid, []).append((batch, thpt))
        state.window_thpt.setdefault(wid, []).append(thpt)


def _evaluate_pending_bmax(state: ControllerState, drop_trigger: float) -> None:
    # Mean throughput comparisons are noisy; only a drop beyond the
    # trigger counts as evidence that the larger batch hurt the worker.
    for wid, old_batch, old_thpt in state.pending_bmax:
        samples = state.window_thpt.get(wid)
        if not samples or wid not in state.current.sizes or old_thpt <= 0:
            continue
        new_thpt = sum(samples) / len(samples)
        new_batch = state.current[wid]
        if new_batch > old_batch and (old_thpt - new_thpt) / old_thpt > drop_trigger:
            update_bmax_on_drop(state, wid, old_batch, new_batch, old_thpt, new_thpt)
    state.pending_bmax = []


def _violates_bounds(state: ControllerState) -> bool:
    for w, size in state.current.sizes.items():
        lo, hi = state.bounds_for(w)
        if size < lo or (hi is not None and size > hi):
            return True
    return False


def run_adjustment_check(
    state: ControllerState, config: ControllerConfig, iteration: int
) -> Decision:
    """Propose, clamp, and dead-band gate; adopt on ADJUST.

    Assumes smoothed times exist for every live worker. Shared by the
    per-iteration BSP step and the commit-cadence ASP loop.
    """
    state.last_check_iter = iteration
    _evaluate_pending_bmax(state, config.bmax_drop_trigger)
    proposal = propose_batches(state, config)
    target = state.b_target if config.conserve_global else None
    clamped, conserved = clamp_bounds(proposal, state.bounds, conserve_total=target)
    if not conserved:
        state.conservation_abandoned += 1
    if _violates_bounds(state):
        # A freshly tightened bound outranks the dead-band: running past
        # a safety cap is never held.
        decision = Decision.ADJUST
    else:
        decision = deadband_check(state.current, clamped, config.deadband)
    if decision is Decision.ADJUST:
        mean_thpt = {w: sum(v) / len(v) for w, v in state.window_thpt.items() if v}
        old = state.current
        state.adopt(clamped, iteration)
        state.pending_bmax = [
            (w, old[w], mean_thpt[w])
            for w in clamped.sizes
            if w in mean_thpt and clamped[w] > old[w]
        ]
    return decision


def controller_step(
    state: ControllerState,
    trace: IterationTrace,
    config: ControllerConfig,
    force: bool = False,
) -> Decision:
    """Run one control check against a finished iteration.

    Measurements are folded in every call; the adjustment pipeline only
    runs once ``window`` iterations have passed since the previous check,
    unless ``force`` is set (used after resource events). On ADJUST the
    state adopts the new allocation and the smoothing window resets.
    """
    times = {w: t for w, t in trace.per_worker_time.items() if w in state.current.sizes}
    if set(times) != set(state.current.sizes):
        raise InvalidInputError("trace must cover all live workers")
    ewma_update(state, times, config.ewma_alpha)
    record_measurements(state, times)
    if len(state.current.sizes) == 1:
        return Decision.HOLD
    if not force and trace.iteration - state.last_check_iter < config.window:
        return Decision.HOLD
    return run_adjustment_check(state, config, trace.iteration)
