"""Stabilization procedures on a single run context.

* :func:`stabilize` topples unstable sites of ``K`` until ``K`` is stable.
* :func:`weak_stabilize` leaves one marked site ``x`` holding at most one
  active particle.
* :func:`stabilize_via_weak` alternates weak stabilizations with single
  topplings at ``x`` and counts the rounds.
* :func:`ghost_estimate_transient` stabilizes the ball, then releases a ghost
  walker from every sleeping particle.
* :func:`layered_stabilize` moves particles sphere by sphere from the boundary
  inwards and creates ghosts at wasted sleep instructions.
* :func:`tree_pack_stabilize` packs particles of a regular tree next to a
  growing corrupted set without ever using an instruction at the origin.

Toppling orders are ``"fifo"``, ``"random"`` and ``"deepest"`` (largest
distance to the origin first, ties to the lowest vertex id).
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit

from . import _prf
from ._prf import hash3, uniform
from .core import Context, InitDist, _read_k, _topple_k
from .graphs import Family

ORDERS = {"fifo": 0, "random": 1, "deepest": 2}

OK = 0
OVER_BUDGET = 1
STOPPED = 2


class StepBudgetExceeded(RuntimeError):
    """A procedure hit its cap on tape reads before finishing."""


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _eligible(state, in_k, wx, v):
    return in_k[v] and state[v] >= (3 if v == wx else 2)


@njit(cache=True, nogil=True)
def _stabilize_k(state, odo, jump, dist, tape, in_k, wx, order, order_key, budget,
                 watch, stop_at):
    """Topple eligible sites of ``in_k`` until none is left.

    ``wx >= 0`` turns this into a weak stabilization with respect to ``wx``.
    Returns ``(topplings, absorbed, status, arrivals at watch)``; with
    ``stop_at > 0`` the run stops early once ``odo[watch] >= stop_at``.
    """
    n = state.size
    buf = np.empty(n, np.int64)
    inq = np.zeros(n, np.bool_)
    head = 0
    cnt = 0
    fifo = order == 0
    for v in range(n):
        if _eligible(state, in_k, wx, v):
            buf[cnt] = v
            inq[v] = True
            cnt += 1
    topplings = 0
    absorbed = 0
    arrivals = 0
    step = 0
    while cnt > 0:
        if fifo:
            v = buf[head]
            head = head + 1 if head + 1 < n else 0
        else:
            if order == 1:
                i = int(uniform(order_key, step, 0) * cnt)
                if i >= cnt:
                    i = cnt - 1
            else:
                i = 0
                for t in range(1, cnt):
                    a = buf[t]
                    b = buf[i]
                    if dist[a] > dist[b] or (dist[a] == dist[b] and a < b):
                        i = t
            v = buf[i]
            buf[i] = buf[cnt - 1]
        cnt -= 1
        inq[v] = False
        step += 1
        if not _eligible(state, in_k, wx, v):
            continue
        if topplings >= budget:
            return topplings, absorbed, 1, arrivals
        r = _topple_k(state, odo, jump, tape, v)
        topplings += 1
        if r >= 0:
            if r == watch:
                arrivals += 1
            if not inq[r] and _eligible(state, in_k, wx, r):
                if fifo:
                    buf[(head + cnt) % n] = r
                else:
                    buf[cnt] = r
                inq[r] = True
                cnt += 1
        elif r == -1:
            absorbed += 1
        if _eligible(state, in_k, wx, v):
            if fifo:
                buf[(head + cnt) % n] = v
            else:
                buf[cnt] = v
            inq[v] = True
            cnt += 1
        if stop_at > 0 and odo[watch] >= stop_at:
            return topplings, absorbed, 2, arrivals
    return topplings, absorbed, 0, arrivals


@njit(cache=True, nogil=True)
def _via_weak_k(state, odo, jump, dist, tape, in_k, x, budget, rounds):
    """Stabilization via weak stabilization of ``(x, K)``.

    Writes ``odo[x]`` after each weak stabilization into ``rounds`` (as far as
    it has room). Returns ``(T, topplings, absorbed, status, first_round_odo_x)``.
    """
    T = 0
    topplings = 0
    absorbed = 0
    m1 = -1
    while True:
        t, a, st, _ = _stabilize_k(state, odo, jump, dist, tape, in_k, x, 0,
                                   np.uint64(0), budget - topplings, -1, 0)
        topplings += t
        absorbed += a
        if st != 0:
            return T, topplings, absorbed, st, m1
        if T < rounds.size:
            rounds[T] = odo[x]
        T += 1
        if m1 < 0:
            m1 = odo[x]
        if state[x] != 2:
            return T, topplings, absorbed, 0, m1
        if topplings >= budget:
            return T, topplings, absorbed, 1, m1
        r = _topple_k(state, odo, jump, tape, x)
        topplings += 1
        if r == -1:
            absorbed += 1
        elif r == -2 and state[x] == 1:
            return T, topplings, absorbed, 0, m1


@njit(cache=True, nogil=True)
def _ghost_walk_k(jump, key, start, target, stop_at_target):
    """Simple random walk from ``start`` until it leaves the ball.

    Returns visits to ``target`` at times >= 1 (at most one if
    ``stop_at_target``).
    """
    k = jump.shape[1]
    v = start
    hits = 0
    t = 0
    while True:
        v = jump[v, int(uniform(key, t, 0) * k)]
        t += 1
        if v < 0:
            return hits
        if v == target:
            hits += 1
            if stop_at_target:
                return hits


@njit(cache=True, nogil=True)
def _ghost_k(state, odo, jump, dist, tape, ghost_key, budget, ghost_visits):
    """Stabilize the whole ball, then walk a ghost from each sleeping site.

    Returns ``(particle visits to the origin, topplings, absorbed, status)``.
    """
    n = state.size
    in_k = np.ones(n, np.bool_)
    initial_at_origin = state[0] - 1 if state[0] >= 2 else state[0]
    t, a, st, arr = _stabilize_k(state, odo, jump, dist, tape, in_k, -1, 0,
                                 np.uint64(0), budget, 0, 0)
    if st != 0:
        return initial_at_origin + arr, t, a, st
    g = 0
    for v in range(n):
        if state[v] == 1:
            ghost_visits[v] = _ghost_walk_k(jump, _prf_key(ghost_key, g), v, 0, False)
            g += 1
    return initial_at_origin + arr, t, a, 0


@njit(cache=True, nogil=True, inline="always")
def _prf_key(key, i):
    return hash3(key, 4, i)


@njit(cache=True, nogil=True)
def _layered_k(state, init_counts, odo, jump, dist, offsets, tape, ghost_key, budget,
               ghost_site, ghost_start, ghost_hit, moved_per_level, stop_reason):
    """Sphere-by-sphere procedure with ghosts.

    ``stop_reason[0..3]`` counts stops at the origin, at an empty site, on a
    sleep instruction and in the exterior. Returns
    ``(G, n_ghosts, reads, status)``.
    """
    L = offsets.size - 2
    reads = 0
    G = 0
    ng = 0
    counts = np.zeros(offsets[L + 1] - offsets[L] if L >= 0 else 0, np.int64)
    for n in range(L, 0, -1):
        lo = offsets[n]
        hi = offsets[n + 1]
        if counts.size < hi - lo:
            counts = np.zeros(hi - lo, np.int64)
        for z in range(lo, hi):
            s = state[z]
            counts[z - lo] = s - 1 if s >= 2 else 0
        for z in range(lo, hi):
            for _ in range(counts[z - lo]):
                moved_per_level[n] += 1
                pos = z
                while True:
                    if reads >= budget:
                        return G, ng, reads, 1
                    r = _topple_k(state, odo, jump, tape, pos)
                    reads += 1
                    if r == -2:
                        if dist[pos] >= n or state[pos] == 1:
                            stop_reason[2] += 1
                            if init_counts[z] == 0:
                                ghost_site[ng] = z
                                ghost_start[ng] = pos
                                ghost_hit[ng] = _ghost_walk_k(jump, _prf_key(ghost_key, ng),
                                                              pos, 0, True) > 0
                                ng += 1
                            break
                    elif r == -1:
                        stop_reason[3] += 1
                        break
                    elif r >= 0:
                        pos = r
                        if r == 0:
                            G += 1
                            stop_reason[0] += 1
                            break
                        if dist[r] <= n - 1 and state[r] == 2:
                            stop_reason[1] += 1
                            break
    return G, ng, reads, 0


@njit(cache=True, nogil=True)
def _pack_k(state, odo, jump, tape, budget, corrupted, c_sizes, path, reads_log):
    """Corrupted-set packing on a regular tree.

    Returns ``(status, cause, particles moved, reads)`` where cause is 0 (none),
    1 (hit the corrupted set before any sleep) or 2 (an unmoved particle lies
    in the corrupted set).
    """
    n = state.size
    pending = np.zeros(n, np.int64)
    for v in range(n):
        s = state[v]
        pending[v] = s - 1 if s >= 2 else 0
    corrupted[:] = False
    corrupted[0] = True
    csize = 1
    k = 0
    reads = 0
    if pending[0] > 0:
        return 0, 2, 0, reads
    for v in range(n):
        while pending[v] > 0:
            pending[v] -= 1
            s = state[v]
            state[v] = 0 if s == 2 else s - 1
            pos = v
            plen = 1
            path[0] = v
            nreads = 0
            last_sleep_read = -1
            last_sleep_pos = -1
            fate = 0
            while True:
                if corrupted[pos]:
                    fate = 1
                    break
                if reads >= budget:
                    return 1, 0, k, reads
                j = odo[pos] + 1
                odo[pos] = j
                reads += 1
                if nreads >= reads_log.size:
                    grown = np.empty(2 * reads_log.size, np.int64)
                    grown[:nreads] = reads_log[:nreads]
                    reads_log = grown
                reads_log[nreads] = pos
                nreads += 1
                ins = _read_k(tape, jump.shape[1], pos, j)
                if ins == -1:
                    last_sleep_read = nreads - 1
                    last_sleep_pos = plen - 1
                elif ins >= 0:
                    y = jump[pos, ins]
                    if y < 0:
                        fate = 2
                        break
                    if plen >= path.size:
                        grown = np.empty(2 * path.size, np.int64)
                        grown[:plen] = path[:plen]
                        path = grown
                    path[plen] = y
                    plen += 1
                    pos = y
            k += 1
            if fate == 2:
                c_sizes[k - 1] = csize
                continue
            if last_sleep_pos < 0:
                c_sizes[k - 1] = csize
                return 0, 1, k, reads
            for r in range(nreads - 1, last_sleep_read, -1):
                odo[reads_log[r]] -= 1
            fail = False
            for i in range(last_sleep_pos, plen - 1):
                u = path[i]
                if not corrupted[u]:
                    corrupted[u] = True
                    csize += 1
                    if pending[u] > 0:
                        fail = True
            z = path[last_sleep_pos]
            state[z] = 1
            c_sizes[k - 1] = csize
            if fail:
                return 0, 2, k, reads
    return 0, 0, k, reads


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _ints(a):
    return [int(v) for v in a]


@dataclass
class StabilizationReport:
    """Result of :func:`stabilize` (or a weak stabilization).

    ``origin_topplings`` is ``m(x)`` for the origin; ``wall_steps`` counts all
    topplings performed by the call.
    """

    state: np.ndarray
    odometer: np.ndarray
    origin_topplings: int
    absorbed: int
    wall_steps: int
    stopped_early: bool = False

    @property
    def sleeping(self):
        return self.state == 1

    def to_dict(self):
        return {"state": _ints(self.state), "odometer": _ints(self.odometer),
                "origin_topplings": int(self.origin_topplings),
                "absorbed": int(self.absorbed), "wall_steps": int(self.wall_steps),
                "sleeping": int(self.sleeping.sum())}


class FinalSite(str, Enum):
    EMPTY = "Empty"
    SLEEPING = "Sleeping"


@dataclass
class WeakStabReport:
    """Result of :func:`stabilize_via_weak`.

    ``round_odometer[i]`` is ``m^{i+1}(x)``, the toppling count at ``x`` after
    the ``i+1``-th weak stabilization; ``first_round_odometer`` is the whole
    odometer after the first one.
    """

    rounds: int
    round_odometer: list
    first_round_odometer: np.ndarray
    final_site: FinalSite
    state: np.ndarray
    odometer: np.ndarray
    absorbed: int
    wall_steps: int

    def to_dict(self):
        return {"rounds": self.rounds, "round_odometer": _ints(self.round_odometer),
                "final_site": self.final_site.value, "absorbed": int(self.absorbed),
                "wall_steps": int(self.wall_steps), "odometer_x_final":
                int(self.round_odometer[-1]) if self.round_odometer else 0}


@dataclass
class GhostReport:
    """Visit counts at the origin: ``W_L`` by particles or ghosts, ``R_L`` by ghosts."""

    W: int
    R: int
    ghosts: int
    origin_topplings: int
    wall_steps: int

    @property
    def G(self):
        return self.W - self.R

    def to_dict(self):
        return {"W": self.W, "R": self.R, "G": self.G, "ghosts": self.ghosts,
                "origin_topplings": self.origin_topplings, "wall_steps": self.wall_steps}


@dataclass
class LayeredReport(GhostReport):
    """:class:`GhostReport` of the sphere-by-sphere procedure.

    ``ghost_sites[i]`` is the (initially empty) site the ``i``-th ghost is
    associated with, ``ghost_starts[i]`` where it was created and
    ``ghost_hits[i]`` whether it reached the origin. ``moved_per_level[n]``
    counts particles moved at the step processing sphere ``n``.
    """

    ghost_sites: np.ndarray = None
    ghost_starts: np.ndarray = None
    ghost_hits: np.ndarray = None
    moved_per_level: np.ndarray = None
    stops: dict = field(default_factory=dict)
    state: np.ndarray = None
    initial_counts: np.ndarray = None

    def to_dict(self):
        d = GhostReport.to_dict(self)
        d.update({"ghost_sites": _ints(self.ghost_sites),
                  "moved_per_level": _ints(self.moved_per_level), "stops": self.stops})
        return d


class PackFailure(str, Enum):
    NO_SLEEP_BEFORE_CORRUPTED = "NoSleepBeforeCorrupted"
    PARTICLE_INSIDE_CORRUPTED = "ParticleInsideCorrupted"


@dataclass
class PackReport:
    success: bool
    failure: PackFailure | None
    corrupted_sizes: list
    particles_moved: int
    origin_untouched: bool
    state: np.ndarray
    odometer: np.ndarray
    corrupted: np.ndarray
    wall_steps: int

    def to_dict(self):
        return {"success": self.success,
                "failure": self.failure.value if self.failure else None,
                "corrupted_sizes": _ints(self.corrupted_sizes),
                "particles_moved": self.particles_moved,
                "origin_untouched": self.origin_untouched, "wall_steps": self.wall_steps}


# ---------------------------------------------------------------------------
# public procedures
# ---------------------------------------------------------------------------

def _mask_of(g, K):
    if K is None:
        return np.ones(g.n, np.bool_)
    K = np.asarray(K)
    if K.dtype == np.bool_:
        return K.copy()
    m = np.zeros(g.n, np.bool_)
    m[K] = True
    return m


def _order_code(order):
    try:
        return ORDERS[order]
    except KeyError:
        raise ValueError(f"unknown toppling order {order!r}; use one of {sorted(ORDERS)}")


def _run_stabilize(ctx, K, order, order_seed, wx, stop_at=0):
    g = ctx.graph
    in_k = _mask_of(g, K)
    okey = np.uint64(_prf.derive(order_seed, _prf.ORDER))
    t, a, st, _ = _stabilize_k(ctx.config.state, ctx.odometer, g.jump, g.dist,
                               ctx.tape.kernel_tape(), in_k, wx, _order_code(order), okey,
                               ctx.budget, g.origin, stop_at)
    ctx.config.absorbed += a
    if st == OVER_BUDGET:
        raise StepBudgetExceeded(f"stabilization exceeded {ctx.budget} topplings")
    return StabilizationReport(ctx.config.state.copy(), ctx.odometer.copy(),
                               int(ctx.odometer[g.origin]), ctx.config.absorbed, t,
                               st == STOPPED)


def stabilize(ctx, K=None, order="fifo", order_seed=0):
    """Topple unstable sites of ``K`` (default: the whole ball) until ``K`` is stable.

    Particles that jump out of the ball are absorbed; particles that jump from
    ``K`` to a ball site outside ``K`` stay there untouched. By the Abelian
    property the final odometer does not depend on ``order``.
    """
    return _run_stabilize(ctx, K, order, order_seed, -1)


def weak_stabilize(ctx, x, K=None, order="fifo", order_seed=0):
    """Stabilize ``K`` except that ``x`` may keep one active particle."""
    in_k = _mask_of(ctx.graph, K)
    if not in_k[x]:
        raise ValueError("x must belong to K")
    return _run_stabilize(ctx, in_k, order, order_seed, int(x))


def stabilize_via_weak(ctx, x, K=None):
    """Stabilize ``K`` through rounds of weak stabilization of ``(x, K)``.

    After each round, if ``x`` holds one active particle it is toppled once;
    the procedure ends when a round leaves ``K`` stable or that single
    toppling puts the particle to sleep.
    """
    g = ctx.graph
    in_k = _mask_of(g, K)
    if not in_k[x]:
        raise ValueError("x must belong to K")
    cap = 64
    while True:
        snapshot = ctx.copy()
        rounds = np.zeros(cap, np.int64)
        first = ctx.copy()
        T, t, a, st, _ = _via_weak_k(ctx.config.state, ctx.odometer, g.jump, g.dist,
                                     ctx.tape.kernel_tape(), in_k, int(x), ctx.budget,
                                     rounds)
        if T <= cap:
            break
        # rerun with room for every round
        ctx.config, ctx.odometer = snapshot.config, snapshot.odometer
        cap = 2 * T
    if st == OVER_BUDGET:
        raise StepBudgetExceeded(f"stabilization exceeded {ctx.budget} topplings")
    ctx.config.absorbed += a
    # replay the first round on a copy to expose the full first-round odometer
    _stabilize_k(first.config.state, first.odometer, g.jump, g.dist, ctx.tape.kernel_tape(),
                 in_k, int(x), 0, np.uint64(0), ctx.budget, -1, 0)
    final = FinalSite.SLEEPING if ctx.config.state[x] == 1 else FinalSite.EMPTY
    return WeakStabReport(T, [int(v) for v in rounds[:T]], first.odometer, final,
                          ctx.config.state.copy(), ctx.odometer.copy(), ctx.config.absorbed, t)


def _ghost_key(seed):
    return np.uint64(_prf.derive(seed, _prf.GHOST))


def ghost_estimate_transient(g, params, seed, mask=None, budget=10**9):
    """Stabilize the ball, then release a ghost walker from every sleeping particle.

    ``W`` counts visits to the origin by particles (initial presence plus
    arrivals) and by ghosts (after their start); ``R`` counts the ghost part,
    so ``W - R`` is the number of particle visits to the origin.
    """
    if not g.is_transient:
        raise ValueError("the ghost estimate is meant for transient graphs")
    ctx = Context.fresh(g, params, seed, mask, budget)
    visits = np.zeros(g.n, np.int64)
    pv, t, a, st = _ghost_k(ctx.config.state, ctx.odometer, g.jump, g.dist,
                            ctx.tape.kernel_tape(), _ghost_key(seed), budget, visits)
    if st == OVER_BUDGET:
        raise StepBudgetExceeded(f"stabilization exceeded {budget} topplings")
    R = int(visits.sum())
    ghosts = int((ctx.config.state == 1).sum())
    return GhostReport(int(pv) + R, R, ghosts, int(ctx.odometer[0]), int(t))


def layered_stabilize(g, params, seed, mask=None, budget=10**9):
    """Move particles sphere by sphere, from the boundary inwards, creating ghosts.

    At the step for sphere ``n`` every particle found there is moved until it
    reaches the origin, reaches a site of ``B_{n-1}`` that was empty, uses a
    sleep instruction outside ``B_{n-1}``, or leaves the ball. A ghost is
    created where a particle stops on a sleep instruction if the site it
    started the step from was empty initially; ghosts walk until they reach
    the origin or leave the ball. ``G = W - R`` is the number of particles
    stopped at the origin.
    """
    ctx = Context.fresh(g, params, seed, mask, budget)
    init_counts = ctx.config.counts().copy()
    cap = g.n + 1
    gs = np.empty(cap, np.int64)
    gst = np.empty(cap, np.int64)
    gh = np.zeros(cap, np.bool_)
    moved = np.zeros(g.radius + 1, np.int64)
    stops = np.zeros(4, np.int64)
    G, ng, reads, st = _layered_k(ctx.config.state, init_counts, ctx.odometer, g.jump, g.dist,
                                  g.sphere_offsets, ctx.tape.kernel_tape(), _ghost_key(seed),
                                  budget, gs, gst, gh, moved, stops)
    if st == OVER_BUDGET:
        raise StepBudgetExceeded(f"layered procedure exceeded {budget} instruction reads")
    R = int(gh[:ng].sum())
    return LayeredReport(int(G) + R, R, int(ng), int(ctx.odometer[0]), int(reads),
                         ghost_sites=gs[:ng].copy(), ghost_starts=gst[:ng].copy(),
                         ghost_hits=gh[:ng].copy(), moved_per_level=moved,
                         stops=dict(zip(("origin", "empty_site", "sleep", "exterior"),
                                        _ints(stops))),
                         state=ctx.config.state.copy(), initial_counts=init_counts)


def tree_pack_stabilize(g, params, seed, mask=None, budget=10**9):
    """Pack particles next to a growing corrupted set, never touching the origin.

    Particles are taken in order of distance to the origin (ties by vertex
    id). Each one walks ignoring sleep instructions until it leaves the ball
    or reaches the corrupted set ``C``; in the latter case it is put to sleep
    at the position of the last sleep instruction it ignored, and every vertex
    it visited from there on joins ``C``. The run fails if a particle reaches
    ``C`` without having seen a sleep instruction, or if an unmoved particle
    sits in ``C`` (checked after every extension, and for the origin at the
    start).
    """
    if g.spec.family is not Family.TREE:
        raise ValueError("tree packing needs a regular tree")
    if params.init is not InitDist.SHIFTED_GEOMETRIC:
        raise ValueError("tree packing expects the shifted geometric initial law")
    ctx = Context.fresh(g, params, seed, mask, budget)
    n_part = ctx.config.n_particles()
    corrupted = np.zeros(g.n, np.bool_)
    sizes = np.zeros(max(n_part, 1), np.int64)
    st, cause, k, reads = _pack_k(ctx.config.state, ctx.odometer, g.jump,
                                  ctx.tape.kernel_tape(), budget, corrupted, sizes,
                                  np.empty(64, np.int64), np.empty(256, np.int64))
    if st == OVER_BUDGET:
        raise StepBudgetExceeded(f"packing exceeded {budget} instruction reads")
    failure = {0: None, 1: PackFailure.NO_SLEEP_BEFORE_CORRUPTED,
               2: PackFailure.PARTICLE_INSIDE_CORRUPTED}[int(cause)]
    return PackReport(failure is None, failure, [1] + _ints(sizes[:k]), int(k),
                      bool(ctx.odometer[0] == 0), ctx.config.state.copy(),
                      ctx.odometer.copy(), corrupted, int(reads))
