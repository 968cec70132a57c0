"""Open-loop batch allocation and portfolio-based VM selection.

Static allocation splits the global batch across workers in proportion to
an estimated capacity (core counts, or flops when GPUs are involved) and
rounds to integers with a largest-remainder scheme so the global batch is
conserved exactly. Portfolio selection enumerates bounded VM-count vectors
and minimizes cost plus a risk term that rewards diversifying across
instance types.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

from .core import (
    BatchAllocation,
    ClusterSpec,
    InfeasiblePortfolioError,
    InvalidInputError,
    WorkerKind,
    WorkerSpec,
)


class CapacityPolicy(enum.Enum):
    CORES = "cores"
    FLOPS = "flops"


class Rounding(enum.Enum):
    # Largest-remainder is the only scheme that conserves the batch sum
    # exactly, which the allocation contract requires.
    LARGEST_REMAINDER = "largest_remainder"


def integer_shares(targets: list[float], total: int, minimum: int = 1) -> list[int]:
    """Round real-valued shares to integers summing exactly to ``total``.

    Largest-remainder method: floor every target, then hand out the
    leftover units by descending fractional part (ties broken toward the
    larger target, then the later index). Entries are then raised to
    ``minimum`` if needed, rebalancing the excess off the largest shares.
    """
    n = len(targets)
    if n == 0:
        raise InvalidInputError("no shares to round")
    if total < n * minimum:
        raise InvalidInputError(f"total {total} cannot give {n} workers at least {minimum} each")
    floors = [int(t) for t in targets]
    floors = [max(f, 0) for f in floors]
    leftover = total - sum(floors)
    if leftover < 0:
        # Can happen when callers pass targets summing above total; trim
        # from the largest entries.
        order = sorted(range(n), key=lambda k: (targets[k], k), reverse=True)
        i = 0
        while leftover < 0:
            k = order[i % n]
            if floors[k] > 0:
                floors[k] -= 1
                leftover += 1
            i += 1
    # Quantize the ordering keys so float dust cannot decide a tie.
    fracs = [round(t - int(t), 9) for t in targets]
    order = sorted(range(n), key=lambda k: (fracs[k], round(targets[k], 9), k), reverse=True)
    out = list(floors)
    for i in range(leftover):
        out[order[i % n]] += 1
    # Enforce the per-worker minimum, paying for it from the largest shares.
    deficit = 0
    for k in range(n):
        if out[k] < minimum:
            deficit += minimum - out[k]
            out[k] = minimum
    while deficit > 0:
        k = max(range(n), key=lambda j: (out[j], j))
        if out[k] <= minimum:
            raise InvalidInputError("cannot satisfy per-worker minimum within the total")
        take = min(deficit, out[k] - minimum)
        out[k] -= take
        deficit -= take
    return out


def capacity_estimate(spec: WorkerSpec, policy: CapacityPolicy) -> float:
    """Open-loop throughput proxy for one worker under the given policy."""
    if policy is CapacityPolicy.CORES:
        return float(spec.cores)
    return float(spec.flops)


def effective_policy(cluster: ClusterSpec, policy: CapacityPolicy | None = None) -> CapacityPolicy:
    """Resolve the capacity policy; mixed CPU/GPU clusters force FLOPS."""
    if cluster.has_gpu():
        return CapacityPolicy.FLOPS
    return policy or CapacityPolicy.CORES


def cluster_capacities(
    cluster: ClusterSpec, policy: CapacityPolicy | None = None
) -> dict[str, float]:
    pol = effective_policy(cluster, policy)
    return {w.id: capacity_estimate(w, pol) for w in cluster.workers}


def static_allocation(
    b0: int,
    capacities: list[float],
    worker_ids: list[str] | None = None,
    rounding: Rounding = Rounding.LARGEST_REMAINDER,
) -> BatchAllocation:
    """Split a global batch of ``K * b0`` proportionally to capacities.

    ``b0`` is the per-worker average mini-batch (the uniform size the job
    would otherwise use), so the global batch equals ``K * b0`` exactly
    after rounding and every worker receives at least one sample.
    """
    k = len(capacities)
    if k < 1:
        raise InvalidInputError("need at least one capacity")
    if b0 < 1:
        raise InvalidInputError(f"average mini-batch must be >= 1, got {b0}")
    if any(not (c > 0) for c in capacities):
        raise InvalidInputError(f"capacities must be positive, got {capacities}")
    if worker_ids is None:
        worker_ids = [f"w{i}" for i in range(k)]
    elif len(worker_ids) != k:
        raise InvalidInputError("worker_ids and capacities must have equal length")
    assert rounding is Rounding.LARGEST_REMAINDER
    total = k * b0
    cap_sum = sum(capacities)
    targets = [total * c / cap_sum for c in capacities]
    sizes = integer_shares(targets, total, minimum=1)
    return BatchAllocation(dict(zip(worker_ids, sizes)))


def static_allocation_for_cluster(
    cluster: ClusterSpec, b0: int, policy: CapacityPolicy | None = None
) -> BatchAllocation:
    caps = cluster_capacities(cluster, policy)
    return static_allocation(b0, list(caps.values()), worker_ids=list(caps.keys()))


@dataclass(frozen=True)
class VmType:
    """One rentable instance type. ``preempt_prob`` is the chance that the
    provider reclaims every instance of this type within one epoch."""

    name: str
    cores: int
    flops: float = 1.0
    cost_rate: float = 0.0
    preempt_prob: float = 0.0
    mem_capacity: int = 1 << 20
    kind: WorkerKind = WorkerKind.CPU

    def __post_init__(self) -> None:
        if self.cost_rate < 0:
            raise InvalidInputError(f"cost_rate must be >= 0, got {self.cost_rate}")
        if not (0.0 <= self.preempt_prob <= 1.0):
            raise InvalidInputError(f"preempt_prob must be in [0, 1], got {self.preempt_prob}")
        if self.cores < 1:
            raise InvalidInputError(f"vm type {self.name!r}: cores must be >= 1")


@dataclass(frozen=True)
class PortfolioCandidate:
    counts: dict[str, int]
    cost: float
    risk: float

    def __post_init__(self) -> None:
        if not any(c > 0 for c in self.counts.values()):
            raise InvalidInputError("portfolio must include at least one instance")
        if not (0.0 <= self.risk <= 1.0):
            raise InvalidInputError(f"risk must be in [0, 1], got {self.risk}")
        object.__setattr__(self, "counts", dict(self.counts))

    @property
    def objective_terms(self) -> tuple[float, float]:
        return self.cost, self.risk


def portfolio_cost(types: list[VmType], counts: tuple[int, ...]) -> float:
    return sum(t.cost_rate * c for t, c in zip(types, counts))


def portfolio_risk(types: list[VmType], counts: tuple[int, ...]) -> float:
    """Probability that every used type is preempted at once.

    Types are assumed independent, so the risk is the product over used
    types; diversifying across types can only lower it.
    """
    risk = 1.0
    for t, c in zip(types, counts):
        if c > 0:
            risk *= t.preempt_prob
    return risk


def select_portfolio(
    types: list[VmType],
    demand: int,
    alpha: float,
    max_per_type: int = 4,
) -> PortfolioCandidate:
    """Pick the count vector minimizing ``cost + alpha * risk``.

    Candidates are all count vectors with per-type counts up to
    ``max_per_type`` whose total cores meet ``demand``. Ties break toward
    lower cost, then fewer distinct types, then the lexicographically
    smallest count vector.
    """
    if not types:
        raise InvalidInputError("need at least one VM type")
    if demand < 1:
        raise InvalidInputError(f"demand must be >= 1, got {demand}")
    if alpha < 0:
        raise InvalidInputError(f"alpha must be >= 0, got {alpha}")
    best: tuple | None = None
    best_counts: tuple[int, ...] | None = None
    for counts in itertools.product(range(max_per_type + 1), repeat=len(types)):
        if sum(c for c in counts) == 0:
            continue
        if sum(t.cores * c for t, c in zip(types, counts)) < demand:
            continue
        cost = portfolio_cost(types, counts)
        risk = portfolio_risk(types, counts)
        used = sum(1 for c in counts if c > 0)
        key = (cost + alpha * risk, cost, used, counts)
        if best is None or key < best:
            best = key
            best_counts = counts
    if best_counts is None:
        raise InfeasiblePortfolioError(
            f"no portfolio with counts <= {max_per_type} reaches {demand} cores"
        )
    return PortfolioCandidate(
        counts={t.name: c for t, c in zip(types, best_counts)},
        cost=portfolio_cost(types, best_counts),
        risk=portfolio_risk(types, best_counts),
    )


def portfolio_to_allocation(
    portfolio: PortfolioCandidate,
    types: list[VmType],
    b0: int,
) -> tuple[ClusterSpec, BatchAllocation]:
    """Expand a portfolio into a cluster and its initial batch allocation.

    Workers are named ``<type>-<i>``; batches follow core counts, or flops
    when the portfolio includes any GPU type.
    """
    by_name = {t.name: t for t in types}
    workers = []
    for name, count in portfolio.counts.items():
        vm = by_name.get(name)
        if vm is None:
            raise InvalidInputError(f"portfolio references unknown VM type {name!r}")
        for i in range(count):
            workers.append(
                WorkerSpec(
                    id=f"{name}-{i}",
                    cores=vm.cores,
                    flops=vm.flops,
                    mem_capacity=vm.mem_capacity,
                    kind=vm.kind,
                )
            )
    cluster = ClusterSpec(workers=tuple(workers))
    return cluster, static_allocation_for_cluster(cluster, b0)
