"""Why the controller needs a dead-band.

Iteration times are stochastic, so the proportional rule always sees a
little error left to chase. Without a dead-band it keeps re-adjusting the
batches forever (each adjustment costing a kill-restart); with a 5%
dead-band it converges once and stays put.
"""

from dynbatch import (
    ClusterSpec,
    ControllerConfig,
    Horizon,
    PerfParams,
    Scenario,
    Uniform,
    WorkerSpec,
    simulate,
)

cluster = ClusterSpec(
    (WorkerSpec("small", 3), WorkerSpec("medium", 9), WorkerSpec("large", 18))
)
noisy = PerfParams(base_rate=1.0, amdahl_p=1.0, b_half=0, noise_sigma=0.03)


def run(deadband):
    scenario = Scenario(
        cluster=cluster,
        initial_alloc=Uniform(512),
        horizon=Horizon(max_iterations=500),
        controller=ControllerConfig(deadband=deadband, ewma_alpha=0.15, window=20),
        default_perf=noisy,
        seed=11,
    )
    return simulate(scenario)


for deadband in (0.0, 0.05):
    result = run(deadband)
    label = "no dead-band " if deadband == 0 else "dead-band 5% "
    print(f"{label}: {result.adjustments:3d} adjustments, "
          f"{result.overhead_time:6.0f}s restart overhead "
          f"({100 * result.overhead_fraction:.1f}% of the run)")
    if deadband == 0:
        sizes = [row.allocation["small"] for row in result.traces[::20]]
        print(f"  small worker's batch, sampled every 20 iters: {sizes[:12]} ...")
