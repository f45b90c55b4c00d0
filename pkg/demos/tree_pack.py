"""Pack stabilization on a tree: how often it succeeds without touching the origin."""
from arw import GraphSpec, InitDist, ModelParams, build_graph, tree_pack_stabilize

g = build_graph(GraphSpec.tree(3, 8))
params = ModelParams(0.3, 1.0, InitDist.SHIFTED_GEOMETRIC)
reports = [tree_pack_stabilize(g, params, s) for s in range(500)]
ok = sum(r.success for r in reports)
print(f"success {ok}/500")
fails = {}
for r in reports:
    if r.failure:
        fails[r.failure.value] = fails.get(r.failure.value, 0) + 1
print("failures", fails)
