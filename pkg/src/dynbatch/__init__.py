"""Dynamic mini-batch sizing for heterogeneous data-parallel training.

The package provides throughput-proportional batch allocation, a
proportional batch-size controller with smoothing, dead-banding, and
bounds, batch-weighted gradient aggregation for real SGD, cloud
elasticity policies, and a deterministic event-driven cluster simulator
that exercises all of it.
"""

from .allocator import (
    CapacityPolicy,
    PortfolioCandidate,
    VmType,
    capacity_estimate,
    integer_shares,
    portfolio_to_allocation,
    select_portfolio,
    static_allocation,
    static_allocation_for_cluster,
)
from .controller import (
    ControllerConfig,
    ControllerState,
    Decision,
    clamp_bounds,
    controller_step,
    deadband_check,
    ewma_update,
    propose_batches,
    update_bmax_on_drop,
)
from .core import (
    BatchAllocation,
    BatchingError,
    ClusterEvent,
    ClusterSpec,
    EventKind,
    IterationTrace,
    SyncMode,
    WorkerKind,
    WorkerSpec,
    heterogeneity_level,
)
from .elasticity import (
    Action,
    BatchMode,
    GlobalBatchPolicy,
    monitor_and_scale_down,
    on_addition,
    on_deflation,
    on_preemption,
)
from .perfmodel import DeflationState, PerfParams, iteration_time, parallel_speedup, throughput
from .simkernel import (
    Explicit,
    Horizon,
    Scenario,
    SimResult,
    Static,
    Uniform,
    asp_commit_schedule,
    overhead_report,
    simulate,
    staleness_stats,
)
from .trainer import (
    Dataset,
    GradientUpdate,
    ModelKind,
    ModelSpec,
    TrainResult,
    least_squares_solution,
    sgd_step,
    train_asp,
    train_bsp,
    weighted_aggregate,
    worker_gradient,
)

__version__ = "0.1.0"
