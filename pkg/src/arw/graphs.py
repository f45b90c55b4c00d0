"""Finite balls of vertex-transitive graphs and random-walk statistics on them.

A :class:`Graph` is the ball ``B_L`` of radius ``L`` around an origin of ``Z``,
``Z^d`` or the ``d``-regular tree. Vertices are integers ``0..n-1`` numbered by
distance to the origin (ties broken deterministically), so the origin is ``0``
and every sphere is a contiguous id range. Neighbours falling outside the ball
are stored as ``-1``; that value stands for the absorbing exterior.
"""
import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from . import _prf
from ._prf import uniform
from .stats import Estimate, mean_and_se, ratio_and_se

DEFAULT_MAX_VERTICES = 1 << 22


class Family(str, Enum):
    LINE = "line"
    LATTICE = "lattice"
    TREE = "tree"


class JumpKind(str, Enum):
    UNIFORM = "uniform"
    TOTALLY_ASYMMETRIC = "totally_asymmetric"


class GraphTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class GraphSpec:
    """Which ball to build.

    ``dimension`` is read only for ``Family.LATTICE`` and ``degree`` only for
    ``Family.TREE``. Totally asymmetric jumps (every jump goes one step to the
    right) exist only on the line.
    """

    family: Family
    radius: int
    dimension: int = 1
    degree: int = 3
    jump_kind: JumpKind = JumpKind.UNIFORM

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "jump_kind", JumpKind(self.jump_kind))
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be a positive integer, got {self.radius!r}")
        if self.family is Family.TREE and self.degree < 3:
            raise ValueError(f"regular tree needs degree >= 3, got {self.degree}")
        if self.family is Family.LATTICE and self.dimension < 1:
            raise ValueError(f"lattice dimension must be >= 1, got {self.dimension}")
        if self.jump_kind is JumpKind.TOTALLY_ASYMMETRIC and self.family is not Family.LINE:
            raise ValueError("totally asymmetric jumps are only defined on the line")

    @classmethod
    def line(cls, radius, jump_kind=JumpKind.UNIFORM):
        return cls(Family.LINE, radius, jump_kind=jump_kind)

    @classmethod
    def lattice(cls, dimension, radius):
        return cls(Family.LATTICE, radius, dimension=dimension)

    @classmethod
    def tree(cls, degree, radius):
        return cls(Family.TREE, radius, degree=degree)

    def to_dict(self):
        d = {"family": self.family.value, "radius": int(self.radius),
             "jump_kind": self.jump_kind.value}
        if self.family is Family.LATTICE:
            d["dimension"] = int(self.dimension)
        if self.family is Family.TREE:
            d["degree"] = int(self.degree)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"family", "radius", "dimension", "degree", "jump_kind"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown graph keys: {sorted(extra)}")
        return cls(**d)

    def label(self):
        if self.family is Family.TREE:
            return f"tree{self.degree}"
        if self.family is Family.LATTICE:
            return f"Z{self.dimension}"
        return "Z-tasym" if self.jump_kind is JumpKind.TOTALLY_ASYMMETRIC else "Z"


def ball_size(spec):
    """Number of vertices of ``B_L`` without building it."""
    L = spec.radius
    if spec.family is Family.TREE:
        d = spec.degree
        return 1 + d * ((d - 1) ** L - 1) // (d - 2)
    dim = 1 if spec.family is Family.LINE else spec.dimension
    return sum(2 ** k * math.comb(dim, k) * math.comb(L, k) for k in range(min(dim, L) + 1))


class Graph:
    """Immutable ball ``B_L``; safe to share between threads.

    Attributes
    ----------
    nbr : int64 array, shape (n, degree)
        Neighbour table; ``-1`` marks the exterior.
    jump : int64 array, shape (n, k)
        Targets of the ``k`` jump directions (``k = degree`` except for the
        totally asymmetric line where ``k = 1``).
    dist : int64 array
        Graph distance to the origin.
    """

    def __init__(self, spec, nbr, jump, dist, coords=None):
        self.spec = spec
        self.nbr = nbr
        self.jump = jump
        self.dist = dist
        self._coords = coords
        self.n = int(dist.size)
        self.origin = 0
        self.radius = spec.radius
        self.sphere_offsets = np.searchsorted(dist, np.arange(spec.radius + 2))
        for a in (nbr, jump, dist):
            a.setflags(write=False)
        self._index = None

    @property
    def degree(self):
        return self.nbr.shape[1]

    @property
    def n_directions(self):
        return self.jump.shape[1]

    @property
    def is_transient(self):
        s = self.spec
        if s.family is Family.TREE:
            return True
        if s.family is Family.LATTICE:
            return s.dimension >= 3
        return s.jump_kind is JumpKind.TOTALLY_ASYMMETRIC

    @property
    def is_amenable(self):
        return self.spec.family is not Family.TREE

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Graph({self.spec.label()}, L={self.radius}, n={self.n})"

    def neighbors(self, v):
        return [int(u) for u in self.nbr[v] if u >= 0]

    def distance(self, v):
        return int(self.dist[v])

    def sphere(self, n):
        """Vertex ids at distance exactly ``n`` from the origin."""
        if not 0 <= n <= self.radius:
            raise ValueError(f"sphere index {n} outside [0, {self.radius}]")
        return np.arange(self.sphere_offsets[n], self.sphere_offsets[n + 1])

    def ball(self, r):
        """Boolean mask of ``B_r`` (clipped to the graph)."""
        return self.dist <= r

    def coords(self, v):
        """Integer coordinates (line, lattice) or child-slot path from the root (tree)."""
        if self._coords is not None:
            c = self._coords[v]
            return int(c[0]) if self.spec.family is Family.LINE else tuple(int(a) for a in c)
        path = []
        while v != 0:
            p = int(self.nbr[v, 0])
            slots = self.nbr[p, 1:] if p != 0 else self.nbr[p]
            path.append(int(np.flatnonzero(slots == v)[0]))
            v = p
        return tuple(reversed(path))

    def vertex_at(self, coords):
        if self._index is None:
            if self._coords is None:
                self._index = {self.coords(v): v for v in range(self.n)}
            elif self.spec.family is Family.LINE:
                self._index = {int(c[0]): v for v, c in enumerate(self._coords)}
            else:
                self._index = {tuple(int(a) for a in c): v for v, c in enumerate(self._coords)}
        key = tuple(coords) if isinstance(coords, (list, tuple)) else coords
        return self._index[key]


def _build_tree(spec):
    d, L = spec.degree, spec.radius
    sizes = [1] + [d * (d - 1) ** (k - 1) for k in range(1, L + 1)]
    off = np.concatenate([[0], np.cumsum(sizes)])
    n = int(off[-1])
    nbr = np.full((n, d), -1, dtype=np.int64)
    dist = np.repeat(np.arange(L + 1), sizes).astype(np.int64)
    if L >= 1:
        nbr[0, :] = np.arange(1, 1 + d)
    for k in range(1, L + 1):
        lo, hi = off[k], off[k + 1]
        idx = np.arange(hi - lo)
        fan = d if k == 1 else d - 1
        nbr[lo:hi, 0] = off[k - 1] + idx // fan
        if k < L:
            children = off[k + 1] + idx[:, None] * (d - 1) + np.arange(d - 1)[None, :]
            nbr[lo:hi, 1:] = children
    return Graph(spec, nbr, nbr.copy(), dist)


def _build_lattice(spec, dim):
    L = spec.radius
    pts = [p for p in itertools.product(range(-L, L + 1), repeat=dim)
           if sum(abs(a) for a in p) <= L]
    pts.sort(key=lambda p: (sum(abs(a) for a in p), p))
    coords = np.array(pts, dtype=np.int64).reshape(len(pts), dim)
    dist = np.abs(coords).sum(axis=1)
    base = 2 * L + 3
    weights = base ** np.arange(dim, dtype=np.int64)

    def encode(c):
        return ((c + L + 1) * weights).sum(axis=-1)

    codes = encode(coords)
    order = np.argsort(codes)
    sorted_codes = codes[order]
    dirs = []
    for axis in range(dim):
        for sign in (1, -1):
            e = np.zeros(dim, dtype=np.int64)
            e[axis] = sign
            dirs.append(e)
    nbr = np.full((len(pts), 2 * dim), -1, dtype=np.int64)
    for j, e in enumerate(dirs):
        target = coords + e
        inside = np.abs(target).sum(axis=1) <= L
        pos = np.searchsorted(sorted_codes, encode(target[inside]))
        nbr[inside, j] = order[pos]
    if spec.family is Family.LINE and spec.jump_kind is JumpKind.TOTALLY_ASYMMETRIC:
        jump = nbr[:, :1].copy()
    else:
        jump = nbr.copy()
    return Graph(spec, nbr, jump, dist.astype(np.int64), coords)


def build_graph(spec, max_vertices=DEFAULT_MAX_VERTICES):
    """Materialize the ball described by ``spec``.

    Raises
    ------
    GraphTooLarge
        If the ball has more than ``max_vertices`` vertices.
    """
    if isinstance(spec, dict):
        spec = GraphSpec.from_dict(spec)
    size = ball_size(spec)
    if size > max_vertices:
        raise GraphTooLarge(f"{spec.label()} ball of radius {spec.radius} has {size} "
                            f"vertices (budget {max_vertices})")
    if spec.family is Family.TREE:
        return _build_tree(spec)
    dim = 1 if spec.family is Family.LINE else spec.dimension
    return _build_lattice(spec, dim)


def sphere_of(g, n):
    return g.sphere(n)


# ---------------------------------------------------------------------------
# random walks
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _walk_stats_k(jump, dist, radius, keys, horizon, visits, returned, exited,
                  climb, steps_away):
    k = jump.shape[1]
    for i in range(keys.size):
        key = keys[i]
        v = 0
        vis = 1
        ret = False
        out = False
        c = 0
        s = 0
        t = 0
        while t < horizon:
            y = jump[v, int(uniform(key, t, 0) * k)]
            t += 1
            if v != 0:
                s += 1
                c += (radius + 1 if y < 0 else dist[y]) - dist[v]
            if y < 0:
                out = True
                break
            v = y
            if v == 0:
                vis += 1
                ret = True
        visits[i] = vis
        returned[i] = ret
        exited[i] = out
        climb[i] = c
        steps_away[i] = s


@njit(cache=True, nogil=True)
def _hit_k(jump, keys, source, target, horizon, hits, censored):
    k = jump.shape[1]
    for i in range(keys.size):
        key = keys[i]
        v = source
        hit = v == target
        t = 0
        while not hit and t < horizon:
            v = jump[v, int(uniform(key, t, 0) * k)]
            t += 1
            if v < 0:
                break
            hit = v == target
        hits[i] = hit
        censored[i] = (not hit) and v >= 0


@dataclass(frozen=True)
class RwStats:
    """Monte Carlo statistics of the walk started at the origin, killed on leaving the ball.

    ``green_C`` is the mean number of visits to the origin (time 0 included),
    ``nonreturn_delta`` the probability of leaving before returning and
    ``speed_alpha`` the mean change of distance per step taken away from the
    origin (a pooled ratio of sums, so Wald's identity makes it consistent).
    """

    green_C: float
    green_C_se: float
    nonreturn_delta: float
    nonreturn_delta_se: float
    speed_alpha: float
    speed_alpha_se: float
    trials: int
    seed: int
    censored: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _walk_keys(seed, trials):
    base = _prf.derive(seed, _prf.WALK)
    return np.array([_prf.derive(base, _prf.WALK, i) for i in range(trials)], dtype=np.uint64)


def _chunks(n, width):
    width = max(1, min(int(width), n)) if n else 1
    edges = np.linspace(0, n, width + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunked(fn, n, parallel):
    from concurrent.futures import ThreadPoolExecutor

    chunks = _chunks(n, parallel)
    if len(chunks) <= 1:
        for a, b in chunks:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        for f in [ex.submit(fn, a, b) for a, b in chunks]:
            f.result()


def estimate_rw_stats(g, trials, horizon=10**6, seed=0, parallel=1):
    """Estimate ``C_G``, ``delta`` and ``alpha`` from ``trials`` walks started at the origin."""
    if trials < 1 or horizon < 1:
        raise ValueError("trials and horizon must be >= 1")
    keys = _walk_keys(seed, trials)
    visits = np.empty(trials, np.int64)
    returned = np.empty(trials, np.bool_)
    exited = np.empty(trials, np.bool_)
    climb = np.empty(trials, np.int64)
    away = np.empty(trials, np.int64)

    def run(a, b):
        _walk_stats_k(g.jump, g.dist, g.radius, keys[a:b], horizon, visits[a:b],
                      returned[a:b], exited[a:b], climb[a:b], away[a:b])

    _run_chunked(run, trials, parallel)
    c, c_se = mean_and_se(visits)
    r, r_se = mean_and_se(returned.astype(np.float64))
    a, a_se = ratio_and_se(climb, away)
    return RwStats(c, c_se, 1.0 - r, r_se, a, a_se, trials, int(seed),
                   int((~exited).sum()))


def tree_hitting_exact(degree, ell):
    """Probability that the walk on the infinite ``degree``-regular tree started at
    distance ``ell`` ever visits the origin: ``(1/(degree-1))**ell``."""
    return (1.0 / (degree - 1)) ** ell


def tree_green_exact(degree):
    """Expected visits to the origin (time 0 included) on the infinite regular tree."""
    return 1.0 / (1.0 - tree_hitting_exact(degree, 1))


def hitting_prob(g, source=None, target=None, *, exact_tree_ell=None, trials=10**4,
                 horizon=10**6, seed=0, parallel=1):
    """Probability that a walk from ``source`` hits ``target`` before leaving the ball.

    With ``exact_tree_ell`` the closed form for the infinite regular tree is
    returned with zero standard error; otherwise ``source`` and ``target`` are
    vertex ids (``target`` defaults to the origin) and the value is estimated.
    """
    if exact_tree_ell is not None:
        if g.spec.family is not Family.TREE:
            raise ValueError("the exact hitting formula applies only to regular trees")
        if exact_tree_ell < 0:
            raise ValueError("ell must be >= 0")
        return Estimate(tree_hitting_exact(g.spec.degree, exact_tree_ell), 0.0, 0, int(seed))
    if source is None:
        raise ValueError("source vertex required")
    target = g.origin if target is None else target
    for v in (source, target):
        if not 0 <= v < g.n:
            raise ValueError(f"vertex {v} not in the ball")
    keys = _walk_keys(seed, trials)
    hits = np.empty(trials, np.bool_)
    censored = np.empty(trials, np.bool_)

    def run(a, b):
        _hit_k(g.jump, keys[a:b], source, target, horizon, hits[a:b], censored[a:b])

    _run_chunked(run, trials, parallel)
    m, se = mean_and_se(hits.astype(np.float64))
    return Estimate(m, se, trials, int(seed))
