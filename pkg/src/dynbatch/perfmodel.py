"""Parametric worker performance model.

Throughput rises with batch size toward a saturation rate set by the
worker's resources and its parallel fraction, then falls once the batch
spills past device memory: gradually for CPUs, as a hard failure for GPUs.
Deflation scales the usable core count without removing the worker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import (
    InvalidInputError,
    MemoryLimitExceededError,
    WorkerKind,
    WorkerSpec,
)

# Throughput never drops below this fraction of the unpenalized rate for
# CPU workers, however far the batch overshoots memory.
CPU_PENALTY_FLOOR = 0.1


@dataclass(frozen=True)
class PerfParams:
    """Tunable curve parameters for one worker.

    ``base_rate`` is samples/sec per effective core at saturation;
    ``amdahl_p`` the parallel fraction; ``b_half`` the batch size at which
    per-device efficiency reaches half of saturation; ``cpu_decline`` the
    fractional throughput loss per sample beyond memory capacity;
    ``noise_sigma`` the lognormal sigma for optional per-iteration time
    noise (applied by the simulator's seeded RNG, 0 disables it).
    """

    base_rate: float = 1.0
    amdahl_p: float = 0.95
    b_half: int = 8
    cpu_decline: float = 0.002
    gpu_cliff: bool = True
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not (self.base_rate > 0):
            raise InvalidInputError(f"base_rate must be > 0, got {self.base_rate}")
        if not (0.0 <= self.amdahl_p <= 1.0):
            raise InvalidInputError(f"amdahl_p must be in [0, 1], got {self.amdahl_p}")
        if self.b_half < 0:
            raise InvalidInputError(f"b_half must be >= 0, got {self.b_half}")
        if self.cpu_decline < 0 or self.noise_sigma < 0:
            raise InvalidInputError("cpu_decline and noise_sigma must be >= 0")


@dataclass(frozen=True)
class DeflationState:
    """Fraction of each worker's resources currently available (1 = full)."""

    factor: dict[str, float]

    def __post_init__(self) -> None:
        for wid, f in self.factor.items():
            if not (0.0 < f <= 1.0):
                raise InvalidInputError(f"deflation factor for {wid!r} must be in (0, 1], got {f}")
        object.__setattr__(self, "factor", dict(self.factor))

    def get(self, worker_id: str) -> float:
        return self.factor.get(worker_id, 1.0)


def parallel_speedup(cores: int, p: float) -> float:
    """Amdahl speedup of ``cores`` ways at parallel fraction ``p``."""
    if cores < 1:
        raise InvalidInputError(f"cores must be >= 1, got {cores}")
    return 1.0 / ((1.0 - p) + p / cores)


def _memory_penalty(spec: WorkerSpec, params: PerfParams, batch: int) -> float:
    if batch <= spec.mem_capacity:
        return 1.0
    if spec.kind is WorkerKind.GPU and params.gpu_cliff:
        raise MemoryLimitExceededError(
            f"worker {spec.id!r}: batch {batch} exceeds device memory capacity {spec.mem_capacity}"
        )
    return max(CPU_PENALTY_FLOOR, 1.0 - params.cpu_decline * (batch - spec.mem_capacity))


def throughput(
    spec: WorkerSpec,
    params: PerfParams,
    batch: int,
    deflation: float = 1.0,
) -> float:
    """Samples/sec the worker sustains at the given batch size.

    Raises MemoryLimitExceededError for GPU workers past their memory
    capacity when ``gpu_cliff`` is set; CPU workers degrade gradually.
    """
    if batch < 1:
        raise InvalidInputError(f"batch must be >= 1, got {batch}")
    if not (0.0 < deflation <= 1.0):
        raise InvalidInputError(f"deflation must be in (0, 1], got {deflation}")
    # A deflated worker keeps at least one effective core until preempted.
    eff_cores = max(1, math.ceil(spec.cores * deflation))
    rate = params.base_rate * parallel_speedup(eff_cores, params.amdahl_p)
    # Past memory capacity extra batch cannot raise utilization further,
    # so the saturation factor freezes there and only the penalty acts;
    # this keeps the curve monotone declining beyond the capacity knee.
    eff_batch = min(batch, spec.mem_capacity)
    rate *= eff_batch / (eff_batch + params.b_half)
    return rate * _memory_penalty(spec, params, batch)


def iteration_time(
    spec: WorkerSpec,
    params: PerfParams,
    batch: int,
    deflation: float = 1.0,
) -> float:
    """Seconds to compute gradients for one mini-batch."""
    return batch / throughput(spec, params, batch, deflation)
