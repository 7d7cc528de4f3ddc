"""
Ablation suites
===============

Gated vs dense experts, and the rank sweep, at a very small budget.  The
full-size runs are `convlora ablate --suite ...`.
"""

from convlora.ablation import ablation_driver, balance_experiment
from convlora.config import RunConfig

cfg = RunConfig(epochs=1, lr=3e-3)
cfg.data.n_train, cfg.data.n_val, cfg.data.n_test = 8, 4, 4

for row in ablation_driver("moe-vs-multiscale", cfg):
    print(row["variant"], "evals", row["expert_evals"], f"it/s {row['iter_per_sec']:.1f}")

for row in ablation_driver("rank-sweep", cfg):
    print("rank", row["rank"], "trainable", row["trainable_params"])

# balance loss on random inputs: lower utilization CV with the term switched on
print("cv with / without balance loss:",
      round(balance_experiment(0, 1.0, steps=200), 3), round(balance_experiment(0, 0.0, steps=200), 3))
