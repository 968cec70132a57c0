"""Desk-scale data-parallel SGD with batch-weighted gradient aggregation.

Workers compute mean gradients over their own mini-batch slices; the
aggregate weights each worker by its share of the global batch, which
makes the combined gradient identical (up to float round-off) to the mean
gradient over the union of the slices. The parameter trajectory therefore
depends only on the global batch content and order, not on how it is
partitioned across workers.

Models are deliberately small convex problems (linear and logistic
regression on seeded synthetic data) so convergence can be checked
against closed-form or windowed-trend oracles.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    BatchAllocation,
    InvalidInputError,
    NumericalFailureError,
)


class ModelKind(enum.Enum):
    LINEAR_REGRESSION = "linreg"
    LOGISTIC_REGRESSION = "logreg"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    dim: int
    params: np.ndarray
    eta: float

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise InvalidInputError(f"dim must be >= 1, got {self.dim}")
        if not (self.eta > 0):
            raise InvalidInputError(f"learning rate must be > 0, got {self.eta}")
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise InvalidInputError(f"params must have shape ({self.dim},), got {params.shape}")
        object.__setattr__(self, "params", params)

    @classmethod
    def zeros(cls, kind: ModelKind, dim: int, eta: float) -> "ModelSpec":
        return cls(kind=kind, dim=dim, params=np.zeros(dim), eta=eta)


@dataclass(frozen=True)
class Dataset:
    """Synthetic regression data regenerable from its recipe."""

    features: np.ndarray
    targets: np.ndarray
    true_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise InvalidInputError("features must be (n, dim) with matching targets")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise InvalidInputError("dataset entries must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def generate(
        cls,
        kind: ModelKind,
        n: int,
        dim: int,
        noise_sigma: float = 0.0,
        seed: int = 0,
    ) -> "Dataset":
        """Deterministic synthetic data from (seed, n, dim, sigma)."""
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(dim)
        X = rng.standard_normal((n, dim))
        if kind is ModelKind.LINEAR_REGRESSION:
            y = X @ w + noise_sigma * rng.standard_normal(n)
        else:
            p = _sigmoid(X @ w)
            y = (rng.random(n) < p).astype(np.float64)
        return cls(features=X, targets=y, true_weights=w)


@dataclass(frozen=True)
class GradientUpdate:
    worker_id: str
    grad: np.ndarray
    batch: int
    model_version_read: int = 0

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise InvalidInputError(f"batch must be >= 1, got {self.batch}")
        object.__setattr__(self, "grad", np.asarray(self.grad, dtype=np.float64))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss(model: ModelSpec, dataset: Dataset, params: np.ndarray | None = None) -> float:
    """Mean loss over the full dataset (half squared error / cross-entropy)."""
    w = model.params if params is None else params
    z = dataset.features @ w
    if model.kind is ModelKind.LINEAR_REGRESSION:
        r = z - dataset.targets
        return float(0.5 * np.mean(r * r))
    p = np.clip(_sigmoid(z), 1e-12, 1.0 - 1e-12)
    y = dataset.targets
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def worker_gradient(
    model: ModelSpec,
    features: np.ndarray,
    targets: np.ndarray,
    worker_id: str = "w0",
    params: np.ndarray | None = None,
    model_version_read: int = 0,
) -> GradientUpdate:
    """Mean per-sample loss gradient over one worker's batch slice."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    if X.shape[0] == 0:
        raise InvalidInputError("batch slice must be non-empty")
    w = model.params if params is None else params
    z = X @ w
    if model.kind is ModelKind.LINEAR_REGRESSION:
        err = z - y
    else:
        err = _sigmoid(z) - y
    grad = X.T @ err / X.shape[0]
    return GradientUpdate(
        worker_id=worker_id, grad=grad, batch=X.shape[0], model_version_read=model_version_read
    )


def weighted_aggregate(updates: list[GradientUpdate]) -> np.ndarray:
    """Combine worker gradients with weights proportional to batch sizes.

    Weights sum to one, so the result equals the mean gradient over the
    union of all the mini-batches exactly (by linearity of the mean).
    """
    if not updates:
        raise InvalidInputError("need at least one gradient update")
    total = sum(u.batch for u in updates)
    if total <= 0:
        raise InvalidInputError("total batch must be positive")
    dims = {u.grad.shape for u in updates}
    if len(dims) != 1:
        raise InvalidInputError(f"inconsistent gradient shapes: {dims}")
    out = np.zeros_like(updates[0].grad)
    for u in updates:
        out += (u.batch / total) * u.grad
    return out


def sgd_step(model: ModelSpec, agg_grad: np.ndarray, k_workers: int | None = None) -> ModelSpec:
    """One descent step with the aggregated gradient.

    The default folds the normalization so a uniform allocation reduces
    to standard mini-batch SGD on the global batch; passing ``k_workers``
    additionally divides the step by the worker count (the literal
    per-worker averaging variant, kept for fidelity experiments).
    """
    g = np.asarray(agg_grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericalFailureError("aggregated gradient is not finite")
    scale = model.eta / (k_workers if k_workers else 1)
    params = model.params - scale * g
    if not np.isfinite(params).all():
        raise NumericalFailureError("parameters diverged to non-finite values")
    return replace(model, params=params)


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    loss: float
    global_batch: int
    allocation: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "type": "loss",
            "iteration": self.iteration,
            "loss": self.loss,
            "global_batch": self.global_batch,
            "allocation": dict(self.allocation),
        }


@dataclass
class TrainResult:
    model: ModelSpec
    losses: list[LossRecord]
    staleness: list[tuple[int, str, int]] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return self.model.params

    def final_loss(self) -> float:
        return self.losses[-1].loss if self.losses else float("nan")


class _SamplePool:
    """Without-replacement draws from a seeded shuffle, reshuffled per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        if count > self.n:
            raise InvalidInputError(f"batch {count} exceeds dataset size {self.n}")
        if self.pos + count > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + count]
        self.pos += count
        return idx


def train_bsp(
    model: ModelSpec,
    dataset: Dataset,
    alloc: BatchAllocation,
    iterations: int,
    seed: int = 0,
    per_worker_mean_scaling: bool = False,
    sampling: str = "partition",
    on_record=None,
) -> TrainResult:
    """Synchronous training: every iteration partitions one global batch
    of ``alloc.global_size`` samples into contiguous per-worker slices,
    aggregates the weighted gradients, and takes one step.

    ``sampling="independent"`` instead lets every worker draw its own
    mini-batch (slices may overlap); that variant carries no
    single-machine equivalence guarantee.
    """
    if alloc.global_size > dataset.n:
        raise InvalidInputError(
            f"global batch {alloc.global_size} exceeds dataset size {dataset.n}"
        )
    if sampling not in ("partition", "independent"):
        raise InvalidInputError(f"unknown sampling mode {sampling!r}")
    rng = np.random.default_rng(seed)
    pool = _SamplePool(dataset.n, rng)
    k = len(alloc.sizes)
    records: list[LossRecord] = []
    current = model
    for t in range(1, iterations + 1):
        slices: dict[str, np.ndarray] = {}
        if sampling == "partition":
            idx = pool.take(alloc.global_size)
            offset = 0
            for wid, b in alloc.sizes.items():
                slices[wid] = idx[offset : offset + b]
                offset += b
        else:
            for wid, b in alloc.sizes.items():
                slices[wid] = rng.choice(dataset.n, size=b, replace=False)
        updates = []
        for wid, sl in slices.items():
            updates.append(
                worker_gradient(
                    current, dataset.features[sl], dataset.targets[sl], worker_id=wid
                )
            )
        agg = weighted_aggregate(updates)
        try:
            current = sgd_step(current, agg, k_workers=k if per_worker_mean_scaling else None)
        except NumericalFailureError as exc:
            raise NumericalFailureError(f"iteration {t}: {exc}") from exc
        rec = LossRecord(t, loss(current, dataset), alloc.global_size, dict(alloc.sizes))
        records.append(rec)
        if on_record:
            on_record(rec.as_dict())
    return TrainResult(model=current, losses=records)


def train_asp(
    model: ModelSpec,
    dataset: Dataset,
    alloc: BatchAllocation,
    schedule: list[tuple[str, int]],
    seed: int = 0,
    on_record=None,
) -> TrainResult:
    """Asynchronous replay of a deterministic commit schedule.

    ``schedule`` lists (worker, staleness) per commit in commit order; a
    commit with staleness ``s`` applies a gradient computed against the
    parameters as of ``s`` versions before it. Each worker's gradient is
    scaled by its batch-share weight before it is applied.
    """
    for wid, s in schedule:
        if wid not in alloc.sizes:
            raise InvalidInputError(f"schedule references unknown worker {wid!r}")
        if s < 0:
            raise InvalidInputError("staleness must be >= 0")
    rng = np.random.default_rng(seed)
    pool = _SamplePool(dataset.n, rng)
    history = [model.params]
    current = model
    records: list[LossRecord] = []
    staleness_log: list[tuple[int, str, int]] = []
    total = alloc.global_size
    for i, (wid, s) in enumerate(schedule):
        read_version = i - s
        if read_version < 0:
            read_version = 0
        read_params = history[read_version]
        b = alloc[wid]
        idx = pool.take(b)
        update = worker_gradient(
            current,
            dataset.features[idx],
            dataset.targets[idx],
            worker_id=wid,
            params=read_params,
            model_version_read=read_version,
        )
        weight = b / total
        try:
            current = sgd_step(current, weight * update.grad)
        except NumericalFailureError as exc:
            raise NumericalFailureError(f"commit {i + 1}: {exc}") from exc
        history.append(current.params)
        staleness_log.append((i + 1, wid, s))
        rec = LossRecord(i + 1, loss(current, dataset), total, dict(alloc.sizes))
        records.append(rec)
        if on_record:
            on_record(rec.as_dict())
    return TrainResult(model=current, losses=records, staleness=staleness_log)


def least_squares_solution(dataset: Dataset) -> np.ndarray:
    """Closed-form minimizer of the mean squared error (normal equations)."""
    sol, *_ = np.linalg.lstsq(dataset.features, dataset.targets, rcond=None)
    return sol
