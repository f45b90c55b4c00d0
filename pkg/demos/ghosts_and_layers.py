"""Ghost bookkeeping for visits to the origin.

The sphere-by-sphere procedure never topples the origin, creates at most one
ghost per initially empty site, and its count G never exceeds the number of
topplings m of the origin in full stabilization.
"""
from arw import Context, GraphSpec, ModelParams, build_graph, layered_stabilize, stabilize

g = build_graph(GraphSpec.lattice(2, 8))
params = ModelParams(0.5, 1.0)
for seed in range(5):
    r = layered_stabilize(g, params, seed)
    m = stabilize(Context.fresh(g, params, seed)).origin_topplings
    print(f"seed {seed}: W={r.W:3d} R={r.R:3d} G={r.G:3d} m={m:3d} ghosts={r.ghosts:3d} "
          f"moved per level {r.moved_per_level.tolist()}")
