import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arw.core import (Context, InitDist, InstructionTape, ModelParams, ParticleConfig,
                      SleepMask, topple)
from arw.estimators import estimate_Q_and_check_bounds, simulate_branching
from arw.graphs import GraphSpec, build_graph, estimate_rw_stats, hitting_prob
from arw.stabilize import (FinalSite, PackFailure, StepBudgetExceeded, ghost_estimate_transient,
                           layered_stabilize, stabilize, stabilize_via_weak,
                           tree_pack_stabilize, weak_stabilize)

from conftest import make_context, random_instance

LINE = build_graph(GraphSpec.line(3))
ORDERS = ("fifo", "random", "deepest")


def all_outcomes(g, counts, sleepers, lam, seed, K):
    """Every final (state, odometer) reachable by some legal toppling order (brute force)."""
    tape = InstructionTape(g, lam, seed)
    in_k = np.zeros(g.n, bool)
    in_k[K] = True
    start = ParticleConfig.from_counts(counts, sleepers)
    seen = set()
    finals = set()
    stack = [(tuple(start.state), tuple([0] * g.n))]
    while stack:
        s, h = stack.pop()
        if (s, h) in seen:
            continue
        seen.add((s, h))
        movable = [v for v in range(g.n) if in_k[v] and s[v] >= 2]
        if not movable:
            finals.add((s, h))
            continue
        for v in movable:
            cfg = ParticleConfig(np.array(s))
            odo = np.array(h)
            topple(cfg, odo, tape, v)
            stack.append((tuple(int(a) for a in cfg.state), tuple(int(a) for a in odo)))
    return finals


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(0, 2), min_size=4, max_size=4),
       st.sampled_from([0.5, 1.0, 2.0]))
def test_every_order_agrees_with_kernel(seed, c, lam):
    g = LINE
    K = [1, 2, 3, 4][: len(c)]  # vertices at distance <= 2
    counts = np.zeros(g.n, np.int64)
    counts[K] = c
    finals = all_outcomes(g, counts, [], lam, seed, K)
    assert len(finals) == 1
    (s, h), = finals
    ctx = make_context(g, counts, [], lam, seed)
    r = stabilize(ctx, K)
    assert tuple(r.state) == s and tuple(r.odometer) == h


def test_empty_config_is_stable():
    ctx = make_context(LINE, np.zeros(LINE.n, np.int64), [], 1.0, 1)
    r = stabilize(ctx)
    assert r.wall_steps == 0 and r.origin_topplings == 0


def test_single_particle_first_instruction_sleep():
    for seed in range(100):
        t = InstructionTape(LINE, 1.0, seed)
        if t.read(0, 1).kind == "sleep":
            break
    counts = np.zeros(LINE.n, np.int64)
    counts[0] = 1
    r = stabilize(make_context(LINE, counts, [], 1.0, seed))
    assert r.odometer[0] == 1 and r.state[0] == 1


def test_orders_mass_and_via_weak(small_graphs):
    rng = np.random.default_rng(0)
    for _ in range(200):
        g, K, counts, sl, lam, seed = random_instance(rng, small_graphs)
        ref = None
        for order in ORDERS:
            ctx = make_context(g, counts, sl, lam, seed)
            mass = ctx.config.mass()
            r = stabilize(ctx, K, order=order, order_seed=seed + 1)
            assert ctx.config.mass() == mass
            assert ctx.config.is_stable(K)
            if ref is None:
                ref = r
            assert np.array_equal(r.odometer, ref.odometer)
            assert np.array_equal(r.state, ref.state)
        x = int(K[rng.integers(len(K))])
        w = stabilize_via_weak(make_context(g, counts, sl, lam, seed), x, K)
        assert np.array_equal(w.odometer, ref.odometer) and np.array_equal(w.state, ref.state)
        assert w.rounds >= 1
        assert all(a <= b for a, b in zip(w.round_odometer, w.round_odometer[1:]))
        assert np.all(w.first_round_odometer <= w.odometer)
        assert w.final_site is (FinalSite.SLEEPING if ref.state[x] == 1 else FinalSite.EMPTY)


def test_weak_stabilization_properties(small_graphs):
    rng = np.random.default_rng(1)
    for _ in range(200):
        g, K, counts, sl, lam, seed = random_instance(rng, small_graphs)
        x = int(K[rng.integers(len(K))])
        full = stabilize(make_context(g, counts, sl, lam, seed), K)
        refs = []
        for order in ORDERS:
            ctx = make_context(g, counts, sl, lam, seed)
            r = weak_stabilize(ctx, x, K, order=order, order_seed=seed)
            inside = np.zeros(g.n, bool)
            inside[K] = True
            others = inside.copy()
            others[x] = False
            assert r.state[x] <= 2 and np.all(r.state[others] <= 1)
            assert np.all(r.odometer <= full.odometer)
            refs.append(r.odometer)
        assert all(np.array_equal(refs[0], o) for o in refs)


def test_weak_with_single_particle_at_x_is_idle():
    counts = np.zeros(LINE.n, np.int64)
    counts[0] = 1
    r = weak_stabilize(make_context(LINE, counts, [], 1.0, 0), 0)
    assert r.wall_steps == 0


def test_weak_two_sites_enumeration():
    # eta(x) = 2 on K = {x, y}: every tape outcome ends weakly stable
    g = build_graph(GraphSpec.line(1))
    x, y = 0, g.vertex_at(1)
    outcomes = set()
    for seed in range(300):
        counts = np.zeros(g.n, np.int64)
        counts[x] = 2
        r = weak_stabilize(make_context(g, counts, [], 1.0, seed), x, [x, y])
        assert r.state[x] <= 2 and r.state[y] <= 1
        outcomes.add((int(r.state[x]), int(r.state[y])))
    assert (2, 1) in outcomes


def test_via_weak_empty():
    w = stabilize_via_weak(make_context(LINE, np.zeros(LINE.n, np.int64), [], 1.0, 0), 0)
    assert w.rounds == 1 and w.final_site is FinalSite.EMPTY


def test_round_law_bound():
    g = build_graph(GraphSpec.tree(3, 6))
    lam = 1.0
    q = estimate_Q_and_check_bounds(g, 0, None, ModelParams(0.5, lam), 10**4, 5, parallel=4)
    T = q.per_trial["rounds"]
    slept = q.per_trial["slept"]
    n = T.size
    for k in range(1, 6):
        p = np.mean((T == k) & slept)
        bound = (1 / (1 + lam)) ** (k - 1) * lam / (1 + lam)
        assert p <= bound + 3 * math.sqrt(bound * (1 - bound) / n)


def test_budget_exceeded():
    ctx = Context.fresh(build_graph(GraphSpec.lattice(2, 6)), ModelParams(0.9, 0.1), 1,
                        budget=10)
    with pytest.raises(StepBudgetExceeded):
        stabilize(ctx)


def test_monotonicity_suite(small_graphs):
    rng = np.random.default_rng(2)
    for _ in range(200):
        g, K, counts, sl, lam, seed = random_instance(rng, small_graphs)
        base = stabilize(make_context(g, counts, sl, lam, seed), K)
        # larger domain
        K2 = np.union1d(K, rng.choice(g.n, size=2))
        assert np.all(base.odometer <= stabilize(make_context(g, counts, sl, lam, seed), K2)
                      .odometer)
        # more particles, sleepers woken
        c2 = counts.copy()
        c2[sl] = 1
        c2[rng.integers(g.n)] += 1
        assert np.all(base.odometer <= stabilize(make_context(g, c2, [], lam, seed), K)
                      .odometer)
        # sleep masks
        for mask in (SleepMask.at_sites(rng.choice(g.n, size=2)), SleepMask.thinned(0.5, seed),
                     SleepMask.everywhere()):
            m = stabilize(make_context(g, counts, sl, lam, seed, mask), K)
            assert np.all(base.odometer <= m.odometer)


def test_mask_everywhere_empties_the_ball():
    g = build_graph(GraphSpec.lattice(2, 4))
    ctx = Context.fresh(g, ModelParams(1.0, 1.0), 3, mask=SleepMask.everywhere())
    r = stabilize(ctx)
    assert not r.sleeping.any() and r.absorbed == g.n


# ghost estimator --------------------------------------------------------------

TREE5 = build_graph(GraphSpec.tree(3, 5))


def test_ghost_requires_transient():
    with pytest.raises(ValueError):
        ghost_estimate_transient(build_graph(GraphSpec.lattice(2, 3)), ModelParams(0.5, 1.0), 0)


def test_ghost_no_sleepers_when_masked():
    r = ghost_estimate_transient(TREE5, ModelParams(1.0, 1.0), 4, mask=SleepMask.everywhere())
    assert r.R == 0 and r.ghosts == 0 and r.W >= 1


def test_ghost_large_lambda_small_loss():
    G = [ghost_estimate_transient(TREE5, ModelParams(0.05, 1e3), s).G for s in range(400)]
    assert np.mean(G) <= 0.1


def test_ghost_invariants():
    for s in range(200):
        r = ghost_estimate_transient(TREE5, ModelParams(0.6, 0.5), s)
        assert r.W >= r.R >= 0
        assert r.G <= r.origin_topplings + 1


def test_ghost_expectation_identity():
    """Mean particle visits to the origin vs sum_y (mu - Q(y)) p_y E[N_0] + Q(origin).

    A ghost released at the origin does not count its starting point (the
    sleeper's arrival was already counted), hence the extra ``Q(origin)``.
    """
    g = build_graph(GraphSpec.tree(3, 4))
    mu, lam, n = 0.5, 0.5, 4000
    params = ModelParams(mu, lam)
    G = np.array([ghost_estimate_transient(g, params, s).G for s in range(n)])
    sleep_at = np.zeros(g.n)
    for s in range(n, 2 * n):
        sleep_at += stabilize(Context.fresh(g, params, s)).sleeping
    Q = sleep_at / n
    N0 = estimate_rw_stats(g, 10**5, seed=8).green_C
    total = 0.0
    for r in range(g.radius + 1):
        sph = g.sphere(r)
        p = 1.0 if r == 0 else hitting_prob(g, int(sph[0]), trials=10**5, seed=r).value
        total += (mu * len(sph) - Q[sph].sum()) * p * N0
    total += Q[0]
    se = G.std(ddof=1) / math.sqrt(n)
    assert abs(G.mean() - total) <= 4 * se + 0.02 * total


# layered procedure ------------------------------------------------------------

def check_layered(g, params, seed):
    r = layered_stabilize(g, params, seed)
    sites = r.ghost_sites
    assert len(set(sites.tolist())) == len(sites)
    assert np.all(r.initial_counts[sites] == 0)
    plain = stabilize(Context.fresh(g, params, seed))
    assert r.G <= plain.origin_topplings
    assert r.W >= r.R >= 0
    return r


def test_layered_empty():
    r = layered_stabilize(build_graph(GraphSpec.lattice(2, 4)), ModelParams(0.0, 1.0), 1)
    assert r.G == 0 and r.ghosts == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.floats(0.05, 5.0),
       st.sampled_from([GraphSpec.lattice(2, 4), GraphSpec.tree(3, 4), GraphSpec.line(8)]))
def test_layered_ghost_accounting(seed, mu, lam, spec):
    check_layered(build_graph(spec), ModelParams(mu, lam), seed)


# tree packing -----------------------------------------------------------------

TREE8 = build_graph(GraphSpec.tree(3, 8))


def geo(mu, lam):
    return ModelParams(mu, lam, InitDist.SHIFTED_GEOMETRIC)


def test_pack_requires_tree_and_geometric():
    with pytest.raises(ValueError):
        tree_pack_stabilize(LINE, geo(0.1, 1.0), 0)
    with pytest.raises(ValueError):
        tree_pack_stabilize(TREE8, ModelParams(0.1, 1.0), 0)


def test_pack_no_particles():
    r = tree_pack_stabilize(TREE8, geo(0.0, 1.0), 3)
    assert r.success and set(r.corrupted_sizes) == {1} and r.origin_untouched


def test_pack_invariants():
    for s in range(300):
        r = tree_pack_stabilize(TREE8, geo(0.1, 1.0), s)
        sizes = r.corrupted_sizes
        assert sizes[0] == 1 and all(a <= b for a, b in zip(sizes, sizes[1:]))
        assert r.odometer[0] == 0 and r.origin_untouched
        assert r.corrupted.sum() == sizes[-1]
        if r.success:
            assert r.failure is None
            assert np.all(r.state <= 1)
        else:
            assert r.failure in (PackFailure.NO_SLEEP_BEFORE_CORRUPTED,
                                 PackFailure.PARTICLE_INSIDE_CORRUPTED)


def test_pack_exit_leaves_corrupted_set():
    # with every sleep masked no particle can settle, so C never grows
    for s in range(50):
        r = tree_pack_stabilize(TREE8, geo(0.05, 1.0), s, mask=SleepMask.everywhere())
        if r.success:
            assert set(r.corrupted_sizes) == {1}


def test_pack_success_vs_branching():
    d, lam, mu, n = 3, 1.0, 0.02, 2000
    succ = np.mean([tree_pack_stabilize(TREE8, geo(mu, lam), s).success for s in range(n)])
    alpha = math.exp(-mu / ((1 - mu) * (d - 1)))
    b = simulate_branching(d, alpha, lam / (1 + lam), TREE8.radius, n, 1)
    se = math.hypot(math.sqrt(succ * (1 - succ) / n), b.survival.stderr)
    assert succ >= b.survival.value - 3 * se
