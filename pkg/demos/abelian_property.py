"""Stabilization does not depend on the toppling order.

One configuration on a 2D ball is stabilized with three legal orders and via
repeated weak stabilization; odometers and final states coincide.
"""
import numpy as np

from arw import Context, GraphSpec, ModelParams, build_graph, stabilize, stabilize_via_weak

g = build_graph(GraphSpec.lattice(2, 6))
params = ModelParams(0.6, 0.5)
runs = {o: stabilize(Context.fresh(g, params, 11), order=o, order_seed=3)
        for o in ("fifo", "random", "deepest")}
runs["via-weak"] = stabilize_via_weak(Context.fresh(g, params, 11), 0)
ref = runs["fifo"]
for name, r in runs.items():
    same = np.array_equal(r.odometer, ref.odometer) and np.array_equal(r.state, ref.state)
    print(f"{name:9s} m(origin)={int(r.odometer[0]):4d} total={int(r.odometer.sum()):6d} "
          f"matches fifo: {same}")
