"""Policies translating cluster events into batch-allocation actions.

Preemptions eagerly redistribute the dead worker's share (gated by the
controller's dead-band so near-no-op moves are held); deflation and
reinflation force a controller check at the next boundary; additions
admit the worker with a capacity-proportional share. The global batch is
either conserved at its target or scaled with resource availability, and
a conserving readjustment can be demoted to scaling when post-event
monitoring shows the surviving workers lost throughput.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .allocator import CapacityPolicy, capacity_estimate, effective_policy, integer_shares
from .controller import Bounds, Decision, clamp_bounds, deadband_check
from .core import (
    BatchAllocation,
    ClusterEvent,
    ClusterExhaustedError,
    ClusterSpec,
    InvalidEventError,
    InvalidInputError,
    IterationTrace,
    SyncMode,
)


class BatchMode(enum.Enum):
    CONSERVING = "conserving"
    SCALING = "scaling"


@dataclass(frozen=True)
class GlobalBatchPolicy:
    """How the global batch reacts to resource availability changes.

    CONSERVING keeps the target global batch across membership changes;
    SCALING keeps the average mini-batch instead. ``monitor_window``
    iterations of throughput are compared around a conserving
    readjustment and a drop strictly beyond ``scale_down_trigger``
    switches the target down to the scaled value.
    """

    mode: BatchMode = BatchMode.CONSERVING
    monitor_window: int = 20
    scale_down_trigger: float = 0.1

    def __post_init__(self) -> None:
        if self.monitor_window < 1:
            raise InvalidInputError(f"monitor_window must be >= 1, got {self.monitor_window}")
        if not (0.0 < self.scale_down_trigger < 1.0):
            raise InvalidInputError(
                f"scale_down_trigger must be in (0, 1), got {self.scale_down_trigger}"
            )


@dataclass(frozen=True)
class Action:
    """What the simulator must do in response to one event."""

    event_id: str
    kind: str
    worker: str | None
    allocation: BatchAllocation
    b_target: int
    adjusted: bool
    restart: bool
    rewind: bool = False
    force_check: bool = False
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "type": "action",
            "event_id": self.event_id,
            "kind": self.kind,
            "worker": self.worker,
            "allocation": self.allocation.as_dict(),
            "b_target": self.b_target,
            "adjusted": self.adjusted,
            "restart": self.restart,
            "rewind": self.rewind,
            "note": self.note,
        }


def _redistribute(
    survivors: BatchAllocation, target: int, bounds: Bounds | None
) -> BatchAllocation:
    clamped, _ = clamp_bounds(survivors, bounds or {}, conserve_total=target)
    return clamped


def on_preemption(
    event: ClusterEvent,
    alloc: BatchAllocation,
    cluster: ClusterSpec,
    sync_mode: SyncMode,
    policy: GlobalBatchPolicy,
    b_target: int,
    deadband: float = 0.05,
    bounds: Bounds | None = None,
    event_id: str = "",
) -> Action:
    """Eagerly recompute batches after losing a worker.

    Conserving mode spreads the target global batch over the survivors in
    proportion to their current shares; scaling mode leaves survivor
    batches untouched and lets the global batch shrink. BSP always
    restarts from the latest checkpoint; ASP restarts only if the
    redistribution is actually adopted.
    """
    wid = event.target
    if wid not in alloc.sizes:
        raise InvalidEventError(f"preempted worker {wid!r} is not in the allocation")
    if len(alloc.sizes) == 1:
        raise ClusterExhaustedError("last worker preempted; no capacity remains")
    survivors = alloc.without(wid)
    if policy.mode is BatchMode.CONSERVING:
        proposed = _redistribute(survivors, b_target, bounds)
        new_target = b_target
    else:
        proposed = survivors
        new_target = survivors.global_size
    decision = deadband_check(survivors, proposed, deadband)
    adjusted = decision is Decision.ADJUST
    new_alloc = proposed if adjusted else survivors
    restart = sync_mode is SyncMode.BSP or adjusted
    return Action(
        event_id=event_id,
        kind="preempt",
        worker=wid,
        allocation=new_alloc,
        b_target=new_target,
        adjusted=adjusted,
        restart=restart,
        rewind=sync_mode is SyncMode.BSP,
        note="held by deadband" if not adjusted else "",
    )


def on_deflation(
    event: ClusterEvent,
    alloc: BatchAllocation,
    b_target: int,
    event_id: str = "",
) -> Action:
    """Record a deflation or reinflation and force a controller check.

    The allocation itself is untouched here; the controller reacts at the
    next iteration boundary, still gated by the dead-band.
    """
    wid = event.target
    if wid not in alloc.sizes:
        raise InvalidEventError(f"{event.kind.value} targets unknown worker {wid!r}")
    return Action(
        event_id=event_id,
        kind=event.kind.value,
        worker=wid,
        allocation=alloc,
        b_target=b_target,
        adjusted=False,
        restart=False,
        force_check=True,
    )


def on_addition(
    event: ClusterEvent,
    alloc: BatchAllocation,
    cluster: ClusterSpec,
    policy: GlobalBatchPolicy,
    b_target: int,
    capacity_policy: CapacityPolicy | None = None,
    bounds: Bounds | None = None,
    event_id: str = "",
) -> Action:
    """Admit a new worker and hand it a capacity-proportional batch.

    ``cluster`` must already include the new worker. Conserving mode
    redistributes the target global batch over all workers by capacity;
    scaling mode grows the global batch by the newcomer's share at the
    current average load per unit capacity.
    """
    wid = event.target
    if wid in alloc.sizes:
        raise InvalidEventError(f"added worker {wid!r} already present")
    pol = effective_policy(cluster, capacity_policy)
    caps = {w.id: capacity_estimate(w, pol) for w in cluster.workers}
    ids = list(alloc.sizes) + [wid]
    if policy.mode is BatchMode.CONSERVING:
        cap_sum = sum(caps[w] for w in ids)
        targets = [b_target * caps[w] / cap_sum for w in ids]
        shares = integer_shares(targets, b_target, minimum=1)
        proposed = _redistribute(BatchAllocation(dict(zip(ids, shares))), b_target, bounds)
        new_target = b_target
    else:
        existing_caps = sum(caps[w] for w in alloc.sizes)
        newcomer = max(1, round(b_target * caps[wid] / existing_caps))
        proposed = alloc.replace(**{wid: newcomer})
        new_target = proposed.global_size
    return Action(
        event_id=event_id,
        kind="add",
        worker=wid,
        allocation=proposed,
        b_target=new_target,
        adjusted=True,
        restart=True,
    )


def aggregate_throughput(traces: list[IterationTrace], workers: set[str]) -> float:
    """Mean over rows of the summed per-worker sample rates.

    Only the given workers contribute, so a window before a membership
    change can be compared like-for-like with a window after it.
    """
    if not traces:
        return 0.0
    totals = []
    for row in traces:
        rate = 0.0
        # Sorted so float summation order never depends on hash seeds.
        for wid in sorted(workers):
            t = row.per_worker_time.get(wid)
            if t and t > 0 and wid in row.allocation.sizes:
                rate += row.allocation[wid] / t
        totals.append(rate)
    return sum(totals) / len(totals)


def monitor_and_scale_down(
    before_traces: list[IterationTrace],
    after_traces: list[IterationTrace],
    policy: GlobalBatchPolicy,
    b_target: int,
    availability: float,
) -> int | None:
    """Demote a conserving readjustment to the scaled global batch.

    Compares the surviving workers' aggregate throughput across the
    monitoring windows; the scaled target is returned only when the drop
    strictly exceeds the trigger. ``availability`` is the live fraction
    of the capacity the target was sized for.
    """
    workers = set()
    for row in after_traces:
        workers.update(row.allocation.sizes)
    before = aggregate_throughput(before_traces, workers)
    after = aggregate_throughput(after_traces, workers)
    if before <= 0:
        return None
    drop = (before - after) / before
    if drop > policy.scale_down_trigger:
        live = max(1, len(workers))
        return max(live, round(b_target * availability))
    return None
