import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arw import _prf
from arw.core import (NEUTRAL, SLEEP, Context, IllegalTopple, InitDist, InstructionTape,
                      ModelParams, ParticleConfig, SleepMask, _plain_tape, _read_k, _topple_k,
                      apply_sleep_mask, dump_tape, init_config, read_instruction, topple)
from arw.graphs import GraphSpec, build_graph

LINE = build_graph(GraphSpec.line(3))
Z2 = build_graph(GraphSpec.lattice(2, 4))


def first_index(tape, x, kind):
    j = 1
    while tape.read(x, j).kind != kind:
        j += 1
    return j


def test_state_order_and_wake_convention():
    cfg = ParticleConfig.from_counts([0, 0, 0, 0, 0, 0, 0], sleeping=[1])
    assert cfg.state[1] == 1 and cfg.sleeping()[1]
    more = ParticleConfig.from_counts([0, 1, 0, 0, 0, 0, 0])
    assert cfg <= more and not more <= cfg


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(1.5, 1.0)
    with pytest.raises(ValueError):
        ModelParams(0.5, 0.0)
    with pytest.raises(ValueError):
        ModelParams(1.0, 1.0, InitDist.SHIFTED_GEOMETRIC)
    p = ModelParams(0.5, 1.0, "shifted_geometric")
    assert p.density == 1.0 and p.sleep_prob == 0.5
    assert ModelParams.from_dict(p.to_dict()) == p


def test_init_full_density():
    cfg = init_config(Z2, ModelParams(1.0, 1.0), seed=4)
    assert np.all(cfg.counts() == 1) and cfg.absorbed == 0
    assert np.all(cfg.state == 2)


def test_init_bernoulli_fraction():
    g = build_graph(GraphSpec.lattice(2, 70))
    cfg = init_config(g, ModelParams(0.5, 1.0), seed=9)
    frac = (cfg.counts() > 0).mean()
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / g.n)


def test_init_shifted_geometric_law():
    g = build_graph(GraphSpec.lattice(2, 70))
    c = init_config(g, ModelParams(0.5, 1.0, InitDist.SHIFTED_GEOMETRIC), seed=2).counts()
    assert abs((c == 0).mean() - 0.5) <= 3 * math.sqrt(0.25 / g.n)
    assert abs(c.mean() - 1.0) <= 3 * math.sqrt(2.0 / g.n)


def test_init_coupled_in_mu():
    lo = init_config(Z2, ModelParams(0.2, 1.0), seed=5)
    hi = init_config(Z2, ModelParams(0.8, 1.0), seed=5)
    assert lo <= hi


def test_tape_deterministic_and_cached():
    a = InstructionTape(Z2, 1.0, 17)
    b = InstructionTape(Z2, 1.0, 17)
    for x in range(0, Z2.n, 5):
        for j in (1, 7, 3):
            assert read_instruction(a, x, j) == read_instruction(a, x, j) == b.read(x, j)
    with pytest.raises(ValueError):
        a.read(0, 0)


def test_tape_matches_kernel():
    t = InstructionTape(Z2, 0.7, 3)
    kt = _plain_tape(np.uint64(t.key), t.sleep_prob)
    for x in range(Z2.n):
        for j in range(1, 6):
            assert _read_k(kt, Z2.n_directions, x, j) == t.code(x, j)


def test_sleep_frequency():
    t = InstructionTape(Z2, 1.0, 8)
    n = 0
    sleeps = 0
    for x in range(Z2.n):
        for j in range(1, 2501):
            sleeps += t.raw(x, j) == SLEEP
            n += 1
    assert n >= 10**5
    assert abs(sleeps / n - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_jump_directions_uniform():
    t = InstructionTape(Z2, 1.0, 21)
    codes = np.array([t.raw(x, j) for x in range(Z2.n) for j in range(1, 801)])
    jumps = codes[codes >= 0]
    freq = np.bincount(jumps, minlength=4) / jumps.size
    assert np.all(np.abs(freq - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / jumps.size))


def test_mask_neutralizes_sleeps_only():
    t = InstructionTape(Z2, 1.0, 12)
    m = apply_sleep_mask(t, SleepMask.at_sites([0, 3]))
    j = first_index(t, 0, "sleep")
    assert m.read(0, j).kind == "neutral"
    for x in (0, 3, 5):
        for i in range(1, 30):
            raw, masked = t.code(x, i), m.code(x, i)
            if raw == SLEEP and x in (0, 3):
                assert masked == NEUTRAL
            else:
                assert masked == raw
    assert apply_sleep_mask(t, SleepMask()).code(0, j) == SLEEP


def test_mask_kernel_agrees():
    t = InstructionTape(Z2, 1.0, 12).masked(SleepMask.at([(1, 2), (4, 1)]) |
                                            SleepMask.thinned(0.4, 99) | SleepMask.at_sites([7]))
    kt = t.kernel_tape()
    for x in range(Z2.n):
        for j in range(1, 8):
            assert _read_k(kt, Z2.n_directions, x, j) == t.code(x, j)


def test_topple_examples():
    t = InstructionTape(LINE, 1.0, 31)
    x = 0
    j = first_index(t, x, "sleep")
    cfg = ParticleConfig.from_counts([1, 0, 0, 0, 0, 0, 0])
    odo = np.zeros(LINE.n, np.int64)
    odo[x] = j - 1
    out = topple(cfg, odo, t, x)
    assert out.instruction.kind == "sleep" and cfg.state[x] == 1 and odo[x] == j

    cfg = ParticleConfig.from_counts([2, 0, 0, 0, 0, 0, 0])
    odo[x] = j - 1
    topple(cfg, odo, t, x)
    assert cfg.state[x] == 3 and odo[x] == j

    j = first_index(t, x, "jump")
    y = t.read(x, j).target
    counts = np.zeros(LINE.n, np.int64)
    counts[x] = 1
    cfg = ParticleConfig.from_counts(counts, sleeping=[y])
    odo[x] = j - 1
    topple(cfg, odo, t, x)
    assert cfg.state[y] == 3 and cfg.state[x] == 0


def test_illegal_topple():
    t = InstructionTape(LINE, 1.0, 1)
    cfg = ParticleConfig.from_counts(np.zeros(LINE.n, np.int64), sleeping=[0])
    odo = np.zeros(LINE.n, np.int64)
    with pytest.raises(IllegalTopple):
        topple(cfg, odo, t, 0)
    out = topple(cfg, odo, t, 0, enforce_legal=False)
    assert not out.legal and odo[0] == 0 and cfg.state[0] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(0, 3), min_size=7, max_size=7),
       st.floats(0.1, 5.0), st.lists(st.integers(0, 6), min_size=1, max_size=40))
def test_kernel_topple_matches_python_and_conserves_mass(seed, counts, lam, sites):
    cfg = ParticleConfig.from_counts(counts)
    mass0 = cfg.mass()
    t = InstructionTape(LINE, lam, seed)
    kt = t.kernel_tape()
    ks = cfg.state.copy()
    ko = np.zeros(LINE.n, np.int64)
    odo = np.zeros(LINE.n, np.int64)
    kabs = 0
    for x in sites:
        if cfg.state[x] < 2:
            continue
        prev = odo.copy()
        out = topple(cfg, odo, t, x)
        r = _topple_k(ks, ko, LINE.jump, kt, x)
        kabs += r == -1
        assert np.array_equal(ks, cfg.state) and np.array_equal(ko, odo)
        assert cfg.mass() == mass0 and kabs == cfg.absorbed
        assert np.all(odo >= prev) and odo.sum() == prev.sum() + 1
        assert out.index == odo[x]


def test_dump_tape(tmp_path):
    ctx = Context.fresh(LINE, ModelParams(1.0, 1.0), 3)
    from arw.stabilize import stabilize

    stabilize(ctx)
    p = tmp_path / "tape.csv"
    dump_tape(ctx.tape, ctx.odometer, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "site,index,instruction"
    assert len(rows) - 1 == ctx.odometer.sum()


def test_prf_streams_distinct():
    assert _prf.derive(1, _prf.TAPE) != _prf.derive(1, _prf.CONFIG)
    assert _prf.trial_key(1, 0) != _prf.trial_key(1, 1)
    assert _prf.trial_keys(5, 3).tolist() == [_prf.trial_key(5, i) for i in range(3)]
