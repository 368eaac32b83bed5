"""Training and randomized verification of the learned estimators.

Generates certified solver targets, fits the primal and dual networks,
and runs the randomized verification whose sample count carries an
explicit (epsilon, beta) guarantee.  Sized to finish in about a minute;
the full-budget run lives in the acceptance suite and the CLI.
"""

import numpy as np

from pdmhe import (
    CertBudget,
    SamplerConfig,
    TrainConfig,
    example_system,
    gen_dataset,
    instance_stream,
    min_sample_size,
    mlp_dual_estimator,
    mlp_primal_estimator,
    train,
    verify_dual,
    verify_primal,
)

model, noise = example_system()
sampler = SamplerConfig(gamma=0.65, window_cap=10, P0=np.eye(2), prior0=np.zeros(2))

print("=== datasets (certified solver targets) ===")
ds_p = gen_dataset(model, noise, 700, seed=1000, kind="primal", sampler=sampler)
ds_d = gen_dataset(model, noise, 700, seed=1001, kind="dual", sampler=sampler)
print(f"primal rows {len(ds_p)} (features {ds_p.inputs.shape[1]}, targets {ds_p.targets.shape[1]}); "
      f"dual rows {len(ds_d)} (targets {ds_d.targets.shape[1]})")

cfg = TrainConfig(epochs=250, batch_size=64, learning_rate=2e-3, seed=7)
net_p, hist_p = train(ds_p, cfg)
net_d, hist_d = train(ds_d, cfg)
print(f"validation loss: primal {hist_p['val_loss'][-1]:.4f}, dual {hist_d['val_loss'][-1]:.4f}")

# a modest budget keeps this demo quick; eps/beta control the sample count
budget = CertBudget.symmetric(eps=0.2, beta=1e-3, delta_p=3.0, delta_d=3.0)
n_each = min_sample_size(budget.eps_p, budget.beta_p)
print(f"\n=== randomized verification (N = {n_each} per branch) ===")
rep_p = verify_primal(mlp_primal_estimator(net_p), budget,
                      instance_stream(model, noise, sampler, seed=2000), seed_info={"seed": 2000})
rep_d = verify_dual(mlp_dual_estimator(net_d), budget,
                    instance_stream(model, noise, sampler, seed=2001), seed_info={"seed": 2001})
print(f"primal: pass={rep_p.passed}, worst cost excess {rep_p.worst_excess:.4f} (allowed {budget.delta_p})")
print(f"dual:   pass={rep_d.passed}, worst value shortfall {rep_d.worst_shortfall:.4f} (allowed {budget.delta_d})")
print(f"verification stream seed {rep_p.seed_info['seed']} disjoint from training seed 1000")
