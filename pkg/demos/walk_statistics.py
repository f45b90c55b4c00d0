"""Walk statistics on a ball of the 3-regular tree.

Estimates the Green's function at the origin, the non-return probability and
the speed, then compares them with the closed forms for the infinite tree.
"""
from arw import GraphSpec, build_graph, estimate_rw_stats, hitting_prob
from arw.estimators import tree_nonreturn_exact, tree_speed_exact

g = build_graph(GraphSpec.tree(3, 12))
s = estimate_rw_stats(g, trials=20000, seed=1, parallel=4)
print(f"green C   {s.green_C:.4f} +- {s.green_C_se:.4f}")
print(f"delta     {s.nonreturn_delta:.4f} +- {s.nonreturn_delta_se:.4f} "
      f"(infinite tree {tree_nonreturn_exact(3):.4f})")
print(f"alpha     {s.speed_alpha:.4f} +- {s.speed_alpha_se:.4f} "
      f"(infinite tree {tree_speed_exact(3):.4f})")
for ell in (1, 2, 3):
    exact = hitting_prob(g, exact_tree_ell=ell)
    print(f"hit origin from distance {ell}: exact {exact.value:.4f}")
