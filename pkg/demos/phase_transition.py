"""Activity at the origin and a bracket for the critical density.

On the line with totally asymmetric jumps the critical density is
lambda/(1+lambda); the bisection should bracket 0.5 for lambda = 1.
"""
from arw import GraphSpec, ModelParams, build_graph, estimate_activity, estimate_mu_c

g = build_graph(GraphSpec.line(200, "totally_asymmetric"))
for mu in (0.3, 0.5, 0.7):
    a = estimate_activity(g, ModelParams(mu, 1.0), trials=200, seed=5, parallel=4)
    print(f"mu={mu}: activity {a.value:.3f} +- {a.stderr:.3f}")
iv = estimate_mu_c(g, 1.0, tol=0.05, trials=200, seed=7, parallel=4)
print(f"mu_c in [{iv.lo:.4f}, {iv.hi:.4f}]")
