"""The certified online runtime: learned fast path with exact backup.

Runs the full estimation loop on a fresh trajectory.  Each step evaluates
both networks, clamps the primal output onto the noise box, and accepts
the learned estimate only when the weak-duality gap certifies its cost is
within Delta of optimal; otherwise the exact solver takes over.
"""

import numpy as np

from pdmhe import (
    SamplerConfig,
    TrainConfig,
    example_system,
    gen_dataset,
    run_certified,
    simulate_trajectory,
    train,
)

model, noise = example_system()
sampler = SamplerConfig(gamma=0.65, window_cap=10, P0=np.eye(2), prior0=np.zeros(2))
cfg = TrainConfig(epochs=250, batch_size=64, learning_rate=2e-3, seed=7)
net_p, _ = train(gen_dataset(model, noise, 700, seed=1000, kind="primal", sampler=sampler), cfg)
net_d, _ = train(gen_dataset(model, noise, 700, seed=1001, kind="dual", sampler=sampler), cfg)

traj = simulate_trajectory(model, noise, np.zeros(2), T=100, seed=12345)
est, results, times, _ = run_certified(
    model, noise, traj.measurements, gamma=0.65, window_cap=10,
    prior0=np.zeros(2), P0=np.eye(2), primal_net=net_p, dual_net=net_d, delta=6.0,
)
exact, _, exact_times, _ = run_certified(
    model, noise, traj.measurements, gamma=0.65, window_cap=10, prior0=np.zeros(2), P0=np.eye(2)
)

print("t    source    gap       |xhat - x|")
for r in results[-8:]:
    err = np.linalg.norm(r.estimate - traj.states[r.t])
    print(f"{r.t:<4d} {r.provenance:<9s} {r.gap:8.4f}  {err:.4f}")

backup_rate = np.mean([r.provenance == "backup" for r in results if r.t >= 10])
err_pd = np.linalg.norm(est[1:] - traj.states[1:], axis=1).mean()
err_ex = np.linalg.norm(exact[1:] - traj.states[1:], axis=1).mean()
print(f"\nbackup rate after start-up   {backup_rate:.3f}")
print(f"mean error: certified runtime {err_pd:.4f} vs exact solver {err_ex:.4f}")
print(f"median step time: certified {np.median(times) * 1e3:.2f} ms vs exact {np.median(exact_times) * 1e3:.2f} ms")
print("start-up steps (t < window) always use the exact solver; the gap column is NaN there")
