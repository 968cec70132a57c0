"""Elastic-cloud policies: portfolios, preemption, deflation, scaling.

Transient VMs are cheap but revocable. This walks the policy layer:
risk-diversified initial VM selection, eager batch redistribution on
preemption (conserving vs scaling the global batch), dead-band-gated
deflation response, and the throughput monitor that demotes an
overloaded conserving target to the scaled one.
"""

from dynbatch import (
    BatchMode,
    ClusterEvent,
    ClusterSpec,
    EventKind,
    GlobalBatchPolicy,
    Horizon,
    PerfParams,
    Scenario,
    Uniform,
    VmType,
    WorkerSpec,
    portfolio_to_allocation,
    select_portfolio,
    simulate,
)

print("== 1. portfolio selection: cost vs simultaneous-preemption risk ==")
types = [
    VmType("big", cores=16, cost_rate=2.0, preempt_prob=0.2),
    VmType("mid", cores=8, cost_rate=1.0, preempt_prob=0.2),
    VmType("tiny", cores=4, cost_rate=0.6, preempt_prob=0.3),
]
for alpha in (0.0, 2.0, 50.0):
    p = select_portfolio(types, demand=24, alpha=alpha)
    used = {k: v for k, v in p.counts.items() if v}
    print(f"  alpha={alpha:5.1f}: {used}  cost/h={p.cost:.1f}  risk={p.risk:.3f}")

p = select_portfolio(types, demand=24, alpha=50.0)
cluster, alloc = portfolio_to_allocation(p, types, b0=96)
print(f"  chosen cluster batches (by core count): {dict(alloc.sizes)}")

print("\n== 2. preemption: conserving vs scaling the global batch ==")
workers = tuple(WorkerSpec(f"w{i}", 8, mem_capacity=1 << 20) for i in range(3))
ideal = PerfParams(base_rate=1.0, amdahl_p=1.0, b_half=0)
preempt = (ClusterEvent(at=2000.0, kind=EventKind.PREEMPT, worker="w2"),)
for mode in (BatchMode.CONSERVING, BatchMode.SCALING):
    sc = Scenario(
        cluster=ClusterSpec(workers),
        initial_alloc=Uniform(128),
        horizon=Horizon(max_seconds=6000.0),
        default_perf=ideal,
        events=preempt,
        policy=GlobalBatchPolicy(mode=mode),
    )
    r = simulate(sc)
    print(f"  {mode.value:>10}: survivors "
          f"{dict(r.final_alloc.sizes)}  global {r.final_alloc.global_size}")

print("\n== 3. conserving overload: the monitor scales the batch down ==")
tight = tuple(WorkerSpec(f"w{i}", 8, mem_capacity=128) for i in range(3))
sc = Scenario(
    cluster=ClusterSpec(tight),
    initial_alloc=Uniform(128),
    horizon=Horizon(max_seconds=20000.0),
    default_perf=PerfParams(base_rate=1.0, amdahl_p=1.0, b_half=8, cpu_decline=0.0035),
    events=preempt,
    policy=GlobalBatchPolicy(mode=BatchMode.CONSERVING, monitor_window=20, scale_down_trigger=0.1),
)
r = simulate(sc)
for a in r.actions:
    print(f"  action: {a.kind:>10}  ->  global target {a.b_target}")
print(f"  final: {dict(r.final_alloc.sizes)} (back inside memory capacity 128)")

print("\n== 4. deflation: dead-band ignores noise, reacts to real loss ==")
three = tuple(WorkerSpec(f"w{i}", 16) for i in range(3))
events = (
    ClusterEvent(at=3000.0, kind=EventKind.DEFLATE, worker="w1", factor=0.25),
    ClusterEvent(at=9000.0, kind=EventKind.REINFLATE, worker="w1"),
)
sc = Scenario(
    cluster=ClusterSpec(three),
    initial_alloc=Uniform(128),
    horizon=Horizon(max_seconds=15000.0),
    default_perf=ideal,
    events=events,
)
r = simulate(sc)
previous = None
for row in r.traces:
    if row.allocation.sizes != previous:
        print(f"  t={row.time:8.0f}s  {dict(row.allocation.sizes)}")
        previous = row.allocation.sizes
print("  (75% deflation shifts the batch away; reinflation restores it)")
