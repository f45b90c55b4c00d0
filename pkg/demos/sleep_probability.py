"""Probability that the origin ends asleep, against its lower and upper bounds."""
import numpy as np

from arw import GraphSpec, ModelParams, build_graph, estimate_Q_and_check_bounds

g = build_graph(GraphSpec.tree(3, 10))
K = np.arange(g.n)
for lam in (0.01, 0.5, 2.0):
    q = estimate_Q_and_check_bounds(g, 0, K, ModelParams(0.5, lam), trials=4000, seed=2,
                                    green_C=2.0, parallel=4)
    print(f"lambda={lam}: Q={q.Q.value:.4f} +- {q.Q.stderr:.4f}")
    for c in q.checks:
        print("   ", c.line())
