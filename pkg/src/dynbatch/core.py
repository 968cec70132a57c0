"""Shared domain types: workers, clusters, batch allocations, iteration traces.

All types in this module are immutable values and safe to share across
threads. Capacity units (cores, flops) are relative; only ratios matter
anywhere downstream.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class BatchingError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(BatchingError, ValueError):
    """An argument violates a documented precondition."""


class InvalidMeasurementError(InvalidInputError):
    """A reported iteration time is nonpositive or nonfinite."""


class InvalidStateError(BatchingError):
    """Internal state does not permit the requested operation."""


class InvalidEventError(BatchingError):
    """A cluster event references an unknown or duplicate worker."""


class InvalidModeError(BatchingError):
    """Operation called on a result from the wrong synchronization mode."""


class MemoryLimitExceededError(BatchingError):
    """A device with a hard memory limit was asked for a too-large batch."""


class InfeasiblePortfolioError(BatchingError):
    """No enumerated VM portfolio can satisfy the core demand."""


class ClusterExhaustedError(BatchingError):
    """Every worker has been preempted; no forward progress is possible."""


class NumericalFailureError(BatchingError):
    """Training produced non-finite parameters or gradients."""


class ConfigError(BatchingError):
    """A scenario file failed validation or could not be read."""


class WorkerKind(enum.Enum):
    CPU = "cpu"
    GPU = "gpu"


class SyncMode(enum.Enum):
    BSP = "bsp"
    ASP = "asp"


@dataclass(frozen=True)
class WorkerSpec:
    """Static description of one worker's resources.

    ``flops`` is the device's half-precision compute rating in arbitrary
    consistent units; ``mem_capacity`` is the largest mini-batch the
    device memory supports.
    """

    id: str
    cores: int
    flops: float = 1.0
    mem_capacity: int = 1 << 20
    kind: WorkerKind = WorkerKind.CPU

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise InvalidInputError(f"worker {self.id!r}: cores must be >= 1, got {self.cores}")
        if not (self.flops > 0):
            raise InvalidInputError(f"worker {self.id!r}: flops must be > 0, got {self.flops}")
        if self.mem_capacity < 1:
            raise InvalidInputError(
                f"worker {self.id!r}: mem_capacity must be >= 1, got {self.mem_capacity}"
            )


@dataclass(frozen=True)
class ClusterSpec:
    workers: tuple[WorkerSpec, ...]
    sync_mode: SyncMode = SyncMode.BSP

    def __post_init__(self) -> None:
        if len(self.workers) == 0:
            raise InvalidInputError("cluster must contain at least one worker")
        ids = [w.id for w in self.workers]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"worker ids must be unique, got {ids}")
        object.__setattr__(self, "workers", tuple(self.workers))

    def worker(self, worker_id: str) -> WorkerSpec:
        for w in self.workers:
            if w.id == worker_id:
                return w
        raise InvalidInputError(f"no worker {worker_id!r} in cluster")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(w.id for w in self.workers)

    def has_gpu(self) -> bool:
        return any(w.kind is WorkerKind.GPU for w in self.workers)


@dataclass(frozen=True)
class BatchAllocation:
    """Per-worker mini-batch sizes plus the derived global batch size.

    ``global_size == sum(sizes.values())`` is enforced at construction;
    instances are immutable, so the invariant holds for their lifetime.
    """

    sizes: dict[str, int]
    global_size: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.sizes:
            raise InvalidInputError("allocation must cover at least one worker")
        for wid, b in self.sizes.items():
            if not isinstance(b, int) or b < 1:
                raise InvalidInputError(f"batch for {wid!r} must be a positive integer, got {b!r}")
        object.__setattr__(self, "sizes", dict(self.sizes))
        object.__setattr__(self, "global_size", sum(self.sizes.values()))

    def __getitem__(self, worker_id: str) -> int:
        return self.sizes[worker_id]

    def without(self, worker_id: str) -> "BatchAllocation":
        if worker_id not in self.sizes:
            raise InvalidEventError(f"no worker {worker_id!r} in allocation")
        rest = {w: b for w, b in self.sizes.items() if w != worker_id}
        if not rest:
            raise ClusterExhaustedError("removing the last worker leaves an empty allocation")
        return BatchAllocation(rest)

    def replace(self, **updates: int) -> "BatchAllocation":
        sizes = dict(self.sizes)
        sizes.update(updates)
        return BatchAllocation(sizes)

    def as_dict(self) -> dict:
        return {"sizes": dict(self.sizes), "global": self.global_size}


@dataclass(frozen=True)
class IterationTrace:
    """One iteration's record emitted by the simulator.

    ``per_worker_time`` holds gradient-computation seconds keyed by worker.
    Under BSP the makespan is the slowest worker plus the sync cost and
    ``staleness`` is empty; under ASP each row records a single commit.
    ``overhead_seconds`` is the restart cost charged at this row.
    """

    iteration: int
    per_worker_time: dict[str, float]
    makespan: float
    allocation: BatchAllocation
    time: float = 0.0
    adjustment_made: bool = False
    staleness: dict[str, int] = field(default_factory=dict)
    overhead_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "type": "iteration",
            "iteration": self.iteration,
            "time": self.time,
            "per_worker_time": dict(self.per_worker_time),
            "makespan": self.makespan,
            "allocation": self.allocation.as_dict(),
            "adjustment_made": self.adjustment_made,
            "staleness": dict(self.staleness),
            "overhead_seconds": self.overhead_seconds,
        }


class EventKind(enum.Enum):
    PREEMPT = "preempt"
    DEFLATE = "deflate"
    REINFLATE = "reinflate"
    ADD = "add"


@dataclass(frozen=True)
class ClusterEvent:
    """Timestamped elasticity event applied at an iteration boundary.

    ``factor`` (DEFLATE only) is the fraction of the worker's resources
    remaining afterwards; ``spec`` (ADD only) describes the new worker.
    """

    at: float
    kind: EventKind
    worker: str | None = None
    factor: float | None = None
    spec: WorkerSpec | None = None

    def __post_init__(self) -> None:
        if self.at < 0:
            raise InvalidInputError(f"event time must be >= 0, got {self.at}")
        if self.kind is EventKind.ADD:
            if self.spec is None:
                raise InvalidInputError("ADD event requires a worker spec")
        elif self.worker is None:
            raise InvalidInputError(f"{self.kind.value} event requires a worker id")
        if self.kind is EventKind.DEFLATE:
            if self.factor is None or not (0.0 < self.factor < 1.0):
                raise InvalidInputError(
                    f"DEFLATE factor must be in (0, 1), got {self.factor}"
                )

    @property
    def target(self) -> str:
        return self.spec.id if self.kind is EventKind.ADD else self.worker  # type: ignore[return-value]


def heterogeneity_level(cluster: ClusterSpec) -> float:
    """Ratio of the largest to the smallest worker capacity (>= 1).

    CPU-only clusters are compared by core count; clusters containing any
    GPU are compared by flops, matching the flops-based allocation used
    for mixed hardware.
    """
    if len(cluster.workers) == 0:
        raise InvalidInputError("cluster is empty")
    if cluster.has_gpu():
        values = [w.flops for w in cluster.workers]
    else:
        values = [float(w.cores) for w in cluster.workers]
    lo, hi = min(values), max(values)
    if lo <= 0 or not math.isfinite(hi):
        raise InvalidInputError("capacities must be positive and finite")
    return hi / lo
