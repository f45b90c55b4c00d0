import numpy as np
import pytest

from arw.core import Context, InstructionTape, ParticleConfig
from arw.graphs import GraphSpec, build_graph

SMALL_SPECS = [GraphSpec.line(3), GraphSpec.lattice(2, 1), GraphSpec.tree(3, 2),
               GraphSpec.lattice(2, 2), GraphSpec.line(4)]


@pytest.fixture(scope="session")
def small_graphs():
    return [build_graph(s) for s in SMALL_SPECS]


def random_instance(rng, graphs, max_sites=7, max_particles=5):
    """Random ``(graph, K, counts, sleeping, lam, tape_seed)`` with ``|K| <= max_sites``."""
    g = graphs[rng.integers(len(graphs))]
    size = int(rng.integers(1, min(max_sites, g.n) + 1))
    K = np.sort(rng.choice(g.n, size=size, replace=False))
    counts = np.zeros(g.n, np.int64)
    for _ in range(int(rng.integers(0, max_particles + 1))):
        counts[rng.integers(g.n)] += 1
    sleepers = [v for v in np.flatnonzero(counts == 1) if rng.random() < 0.3]
    for v in sleepers:
        counts[v] = 0
    lam = float(rng.choice([0.2, 0.5, 1.0, 3.0]))
    return g, K, counts, sleepers, lam, int(rng.integers(2**31))


def make_context(g, counts, sleepers, lam, seed, mask=None):
    cfg = ParticleConfig.from_counts(counts, sleepers)
    return Context(g, cfg, InstructionTape(g, lam, seed, mask))
