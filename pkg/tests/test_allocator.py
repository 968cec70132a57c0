import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbatch.allocator import (
    CapacityPolicy,
    PortfolioCandidate,
    VmType,
    capacity_estimate,
    effective_policy,
    integer_shares,
    portfolio_cost,
    portfolio_risk,
    portfolio_to_allocation,
    select_portfolio,
    static_allocation,
)
from dynbatch.core import (
    ClusterSpec,
    InfeasiblePortfolioError,
    InvalidInputError,
    WorkerKind,
    WorkerSpec,
)


def brute_force_best_rounding(targets, total):
    """Smallest achievable max |b_k - target_k| over integer triples."""
    best = float("inf")
    lo = [max(1, int(t) - 2) for t in targets]
    hi = [int(t) + 3 for t in targets]
    for b1 in range(lo[0], hi[0]):
        for b2 in range(lo[1], hi[1]):
            b3 = total - b1 - b2
            if b3 < 1:
                continue
            dev = max(abs(b1 - targets[0]), abs(b2 - targets[1]), abs(b3 - targets[2]))
            best = min(best, dev)
    return best


class TestStaticAllocation:
    def test_homogeneous_uniform(self):
        a = static_allocation(128, [8, 8, 8])
        assert list(a.sizes.values()) == [128, 128, 128]

    def test_cpu_utilization_table_config(self):
        # (12,9,18) cores at b0=128 from the reported utilization runs.
        a = static_allocation(128, [12, 9, 18])
        assert list(a.sizes.values()) == [118, 89, 177]
        assert a.global_size == 384

    def test_rounding_is_minimax_optimal(self):
        total = 3 * 128
        targets = [total * c / 39 for c in (12, 9, 18)]
        a = static_allocation(128, [12, 9, 18])
        ours = max(abs(b - t) for b, t in zip(a.sizes.values(), targets))
        assert ours == pytest.approx(brute_force_best_rounding(targets, total))

    def test_gpu_cpu_flops_split(self):
        # 0.813:0.187 flops ratio between the GPU and CPU workers.
        a = static_allocation(256, [0.813, 0.187])
        assert list(a.sizes.values()) == [416, 96]
        assert a.global_size == 512

    def test_minimum_one_with_rebalance(self):
        a = static_allocation(1, [1000.0, 0.001, 0.001])
        assert all(b >= 1 for b in a.sizes.values())
        assert a.global_size == 3

    def test_rejects_bad_inputs(self):
        with pytest.raises(InvalidInputError):
            static_allocation(0, [1, 2])
        with pytest.raises(InvalidInputError):
            static_allocation(8, [])
        with pytest.raises(InvalidInputError):
            static_allocation(8, [1.0, -2.0])

    @given(
        caps=st.lists(st.floats(min_value=0.01, max_value=1000), min_size=1, max_size=8),
        b0=st.integers(min_value=1, max_value=2048),
    )
    @settings(max_examples=200)
    def test_sum_conserved(self, caps, b0):
        a = static_allocation(b0, caps)
        assert a.global_size == len(caps) * b0
        assert all(b >= 1 for b in a.sizes.values())

    @given(
        caps=st.lists(st.floats(min_value=0.01, max_value=100), min_size=2, max_size=6),
        b0=st.integers(min_value=2, max_value=512),
        scale=st.floats(min_value=0.1, max_value=50),
    )
    @settings(max_examples=100)
    def test_scaling_invariance(self, caps, b0, scale):
        a = static_allocation(b0, caps)
        b = static_allocation(b0, [c * scale for c in caps])
        assert a.sizes == b.sizes

    def test_permutation_equivariance(self):
        a = static_allocation(100, [3.0, 9.0, 18.0], worker_ids=["x", "y", "z"])
        b = static_allocation(100, [18.0, 3.0, 9.0], worker_ids=["z", "x", "y"])
        assert a.sizes == b.sizes


class TestIntegerShares:
    def test_exact_targets_unchanged(self):
        assert integer_shares([10.0, 20.0, 30.0], 60) == [10, 20, 30]

    def test_tie_goes_to_larger_target(self):
        # (38.4, 115.2, 230.4): the two 0.4 fractions tie; the larger
        # target takes the leftover unit.
        assert integer_shares([38.4, 115.2, 230.4], 384) == [38, 115, 231]

    def test_equal_tie_goes_to_later_index(self):
        third = 256 / 3
        assert integer_shares([third, third, third], 256) == [85, 85, 86]

    def test_total_too_small(self):
        with pytest.raises(InvalidInputError):
            integer_shares([0.5, 0.5], 1)


class TestCapacityEstimate:
    def test_cores_policy(self):
        assert capacity_estimate(WorkerSpec("a", 16), CapacityPolicy.CORES) == 16

    def test_flops_policy(self):
        assert capacity_estimate(WorkerSpec("a", 16, flops=18.7), CapacityPolicy.FLOPS) == 18.7

    def test_gpu_presence_forces_flops(self):
        mixed = ClusterSpec(
            (
                WorkerSpec("c", 48, flops=0.187),
                WorkerSpec("g", 1, flops=0.813, kind=WorkerKind.GPU),
            )
        )
        assert effective_policy(mixed, CapacityPolicy.CORES) is CapacityPolicy.FLOPS
        cpu_only = ClusterSpec((WorkerSpec("c", 48),))
        assert effective_policy(cpu_only) is CapacityPolicy.CORES


def brute_force_portfolio(types, demand, alpha, max_per_type):
    best_key, best_counts = None, None
    for counts in itertools.product(range(max_per_type + 1), repeat=len(types)):
        if sum(counts) == 0:
            continue
        if sum(t.cores * c for t, c in zip(types, counts)) < demand:
            continue
        cost = sum(t.cost_rate * c for t, c in zip(types, counts))
        risk = 1.0
        for t, c in zip(types, counts):
            if c > 0:
                risk *= t.preempt_prob
        used = sum(1 for c in counts if c > 0)
        key = (cost + alpha * risk, cost, used, counts)
        if best_key is None or key < best_key:
            best_key, best_counts = key, counts
    return best_counts


class TestPortfolio:
    def test_alpha_zero_picks_cheapest(self):
        types = [
            VmType("cheap", cores=8, cost_rate=1.0, preempt_prob=0.9),
            VmType("costly", cores=8, cost_rate=2.0, preempt_prob=0.0),
        ]
        p = select_portfolio(types, demand=8, alpha=0.0)
        assert p.counts == {"cheap": 1, "costly": 0}

    def test_large_alpha_diversifies(self):
        # With two types at preempt_prob 0.2 each, mixing gives risk
        # 0.04 < 0.2 and wins once alpha dominates cost.
        types = [
            VmType("a", cores=8, cost_rate=1.0, preempt_prob=0.2),
            VmType("b", cores=8, cost_rate=1.0, preempt_prob=0.2),
        ]
        p = select_portfolio(types, demand=16, alpha=1000.0)
        assert p.counts == {"a": 1, "b": 1}
        assert p.risk == pytest.approx(0.04)

    def test_single_type_minimal_count(self):
        types = [VmType("only", cores=4, cost_rate=1.0, preempt_prob=0.5)]
        for alpha in (0.0, 10.0, 1e6):
            p = select_portfolio(types, demand=10, alpha=alpha)
            assert p.counts == {"only": 3}

    def test_infeasible_demand(self):
        types = [VmType("tiny", cores=1, cost_rate=1.0)]
        with pytest.raises(InfeasiblePortfolioError):
            select_portfolio(types, demand=100, max_per_type=4, alpha=0.0)

    @given(
        data=st.data(),
        n_types=st.integers(min_value=1, max_value=5),
        alpha=st.floats(min_value=0, max_value=100),
    )
    @settings(max_examples=250, deadline=None)
    def test_matches_exhaustive_enumeration(self, data, n_types, alpha):
        types = [
            VmType(
                name=f"t{i}",
                cores=data.draw(st.integers(min_value=1, max_value=32)),
                cost_rate=data.draw(st.floats(min_value=0, max_value=10)),
                preempt_prob=data.draw(st.floats(min_value=0, max_value=1)),
            )
            for i in range(n_types)
        ]
        max_cores = sum(t.cores for t in types) * 4
        demand = data.draw(st.integers(min_value=1, max_value=max_cores))
        expected = brute_force_portfolio(types, demand, alpha, 4)
        if expected is None:
            with pytest.raises(InfeasiblePortfolioError):
                select_portfolio(types, demand, alpha, max_per_type=4)
        else:
            got = select_portfolio(types, demand, alpha, max_per_type=4)
            assert tuple(got.counts[t.name] for t in types) == expected

    def test_alpha_sweep_monotonicity(self):
        types = [
            VmType("a", cores=8, cost_rate=1.0, preempt_prob=0.5),
            VmType("b", cores=6, cost_rate=1.5, preempt_prob=0.2),
            VmType("c", cores=4, cost_rate=2.5, preempt_prob=0.05),
        ]
        prev_cost, prev_risk = None, None
        for alpha in (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1000.0):
            p = select_portfolio(types, demand=16, alpha=alpha)
            if prev_cost is not None:
                assert p.cost >= prev_cost - 1e-12
                assert p.risk <= prev_risk + 1e-12
            prev_cost, prev_risk = p.cost, p.risk


class TestPortfolioToAllocation:
    def test_uniform_pair(self):
        types = [VmType("a", cores=4)]
        p = select_portfolio(types, demand=8, alpha=0.0)
        cluster, alloc = portfolio_to_allocation(p, types, b0=64)
        assert list(alloc.sizes.values()) == [64, 64]

    def test_two_sizes(self):
        types = [VmType("a", cores=4), VmType("b", cores=8)]
        p = PortfolioCandidate(counts={"a": 1, "b": 1}, cost=0.0, risk=0.0)
        cluster, alloc = portfolio_to_allocation(p, types, b0=96)
        assert alloc.sizes == {"a-0": 64, "b-0": 128}

    def test_three_sizes(self):
        types = [VmType("a", cores=4), VmType("b", cores=8), VmType("c", cores=12)]
        p = PortfolioCandidate(counts={"a": 1, "b": 1, "c": 1}, cost=0.0, risk=0.0)
        cluster, alloc = portfolio_to_allocation(p, types, b0=128)
        assert alloc.sizes == {"a-0": 64, "b-0": 128, "c-0": 192}

    def test_gpu_type_forces_flops(self):
        types = [
            VmType("cpu", cores=48, flops=0.187),
            VmType("gpu", cores=1, flops=0.813, kind=WorkerKind.GPU),
        ]
        p = PortfolioCandidate(counts={"cpu": 1, "gpu": 1}, cost=0.0, risk=0.0)
        cluster, alloc = portfolio_to_allocation(p, types, b0=256)
        assert alloc.sizes == {"cpu-0": 96, "gpu-0": 416}

    def test_risk_and_cost_accessors(self):
        types = [VmType("a", cores=2, cost_rate=3.0, preempt_prob=0.5)]
        assert portfolio_cost(types, (2,)) == 6.0
        assert portfolio_risk(types, (2,)) == 0.5
        assert portfolio_risk(types, (0,)) == 1.0
