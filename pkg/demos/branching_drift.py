"""Branching particle system: the potential decays when the drift factor is below one."""
from arw import drift_factor, simulate_branching

for alpha_b in (0.9, 0.99):
    print(f"alpha_b={alpha_b}: factor {drift_factor(3, alpha_b, 0.75):.4f}")
rep = simulate_branching(3, 0.99, 0.75, max_steps=2000, trials=20, seed=9, parallel=4)
print(f"mean one-step ratio {rep.ratio_mean:.4f} +- {rep.ratio_stderr:.4f} "
      f"over {rep.ratio_samples} steps; survival {rep.survival.value:.3f}")
for c in rep.checks:
    print("   ", c.line())
