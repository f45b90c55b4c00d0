"""Particle configurations, instruction tapes and the toppling operator.

Site states are stored as small integers whose natural order is the order
``0 < rho < 1 < 2 < ...`` used throughout the model:

====== =====================
code   state
====== =====================
0      empty
1      one sleeping particle
k + 1  k active particles
====== =====================

so comparisons between configurations are plain integer comparisons and a
site is unstable exactly when its code is at least 2.

Instruction codes are ``SLEEP`` (-1), ``NEUTRAL`` (-2) or a jump direction
``0..k-1`` indexing the graph's ``jump`` table.
"""
import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit

from . import _prf
from ._prf import uniform

EMPTY = 0
SLEEPING = 1

SLEEP = -1
NEUTRAL = -2

# return codes of _topple_k besides a target vertex id
ABSORBED = -1
SLEPT = -2
IDLE = -3

_PAIR_SHIFT = 1 << 32


def active(k):
    """State code for ``k >= 1`` active particles."""
    if k < 1:
        raise ValueError("active state needs at least one particle")
    return k + 1


def n_particles(code):
    return 0 if code == EMPTY else 1 if code == SLEEPING else int(code) - 1


def state_name(code):
    return "0" if code == EMPTY else "rho" if code == SLEEPING else str(int(code) - 1)


class IllegalTopple(RuntimeError):
    """Toppling of a stable site requested with ``enforce_legal``."""


class InitDist(str, Enum):
    BERNOULLI = "bernoulli"
    SHIFTED_GEOMETRIC = "shifted_geometric"


@dataclass(frozen=True)
class ModelParams:
    """Density ``mu``, sleep rate ``lam`` and the initial site law.

    For ``SHIFTED_GEOMETRIC`` the site count is ``k`` with probability
    ``mu**k * (1 - mu)``, so ``mu`` must be below 1 and the particle density is
    ``mu / (1 - mu)``.
    """

    mu: float
    lam: float
    init: InitDist = InitDist.BERNOULLI

    def __post_init__(self):
        object.__setattr__(self, "init", InitDist(self.init))
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.init is InitDist.SHIFTED_GEOMETRIC and self.mu >= 1.0:
            raise ValueError("shifted geometric initial law needs mu < 1")

    @property
    def sleep_prob(self):
        return self.lam / (1.0 + self.lam)

    @property
    def density(self):
        if self.init is InitDist.BERNOULLI:
            return self.mu
        return self.mu / (1.0 - self.mu)

    @property
    def empty_prob(self):
        return 1.0 - self.mu

    def with_mu(self, mu):
        return ModelParams(mu, self.lam, self.init)

    def to_dict(self):
        return {"mu": self.mu, "lambda": self.lam, "init": self.init.value}

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"mu", "lambda", "init"}
        if extra:
            raise ValueError(f"unknown model keys: {sorted(extra)}")
        return cls(float(d["mu"]), float(d["lambda"]), d.get("init", InitDist.BERNOULLI))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _is_masked(tape, x, j):
    mall = tape[2]
    msites = tape[3]
    mpairs = tape[4]
    thin_p = tape[5]
    thin_k = tape[6]
    if mall:
        return True
    if msites.size > 0 and msites[x]:
        return True
    if mpairs.size > 0:
        code = np.int64(x) * np.int64(4294967296) + np.int64(j)
        i = np.searchsorted(mpairs, code)
        if i < mpairs.size and mpairs[i] == code:
            return True
    for i in range(thin_p.size):
        if uniform(thin_k[i], x, j) < thin_p[i]:
            return True
    return False


@njit(cache=True, nogil=True)
def _read_k(tape, k, x, j):
    sp = tape[1]
    u = uniform(tape[0], x, j)
    if u < sp:
        if _is_masked(tape, x, j):
            return -2
        return -1
    d = int((u - sp) / (1.0 - sp) * k)
    return d if d < k else k - 1


@njit(cache=True, nogil=True)
def _add_particle(state, y):
    t = state[y]
    state[y] = 2 if t == 0 else (3 if t == 1 else t + 1)


@njit(cache=True, nogil=True)
def _topple_k(state, odo, jump, tape, x):
    """Use the next instruction at ``x`` (assumed unstable).

    Returns the target vertex of a jump, or ABSORBED / SLEPT / IDLE.
    """
    j = odo[x] + 1
    odo[x] = j
    ins = _read_k(tape, jump.shape[1], x, j)
    if ins >= 0:
        s = state[x]
        state[x] = 0 if s == 2 else s - 1
        y = jump[x, ins]
        if y < 0:
            return -1
        _add_particle(state, y)
        return y
    if ins == -1:
        if state[x] == 2:
            state[x] = 1
        return -2
    return -3


@njit(cache=True, nogil=True)
def _plain_tape(key, sleep_p):
    return (key, sleep_p, False, np.zeros(0, np.bool_), np.zeros(0, np.int64),
            np.zeros(0, np.float64), np.zeros(0, np.uint64))


@njit(cache=True, nogil=True)
def _init_k(state, key, mu, geometric):
    state[:] = 0
    if mu <= 0.0:
        return
    if geometric:
        lm = np.log(mu)
        for v in range(state.size):
            u = uniform(key, v, 0)
            c = int(np.floor(np.log1p(-u) / lm))
            state[v] = 0 if c <= 0 else c + 1
    else:
        for v in range(state.size):
            if uniform(key, v, 0) < mu:
                state[v] = 2


# ---------------------------------------------------------------------------
# masks and tapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SleepMask:
    """Set of tape positions ``(site, index)`` whose sleep instruction is neutralized.

    Masks are built from four primitives and combined with ``|``:

    * ``SleepMask.everywhere()``: every position,
    * ``SleepMask.at_sites(sites)``: every index at the given sites,
    * ``SleepMask.at(pairs)``: explicit ``(site, index)`` positions,
    * ``SleepMask.thinned(p, key)``: each position independently with
      probability ``p`` (a fixed pseudorandom subset determined by ``key``).
    """

    everywhere_: bool = False
    sites: frozenset = frozenset()
    pairs: frozenset = frozenset()
    thinning: tuple = ()

    @classmethod
    def everywhere(cls):
        return cls(everywhere_=True)

    @classmethod
    def at_sites(cls, sites):
        return cls(sites=frozenset(int(s) for s in sites))

    @classmethod
    def at(cls, pairs):
        return cls(pairs=frozenset((int(x), int(j)) for x, j in pairs))

    @classmethod
    def thinned(cls, p, key):
        return cls(thinning=((float(p), int(key)),))

    def __or__(self, other):
        return SleepMask(self.everywhere_ or other.everywhere_, self.sites | other.sites,
                         self.pairs | other.pairs,
                         tuple(sorted(set(self.thinning) | set(other.thinning))))

    def is_empty(self):
        return not (self.everywhere_ or self.sites or self.pairs or self.thinning)

    def __call__(self, site, index):
        if self.everywhere_ or site in self.sites or (site, index) in self.pairs:
            return True
        return any(uniform(np.uint64(k), site, index) < p for p, k in self.thinning)

    def kernel_parts(self, n):
        sites = np.zeros(n if self.sites else 0, np.bool_)
        if self.sites:
            sites[sorted(self.sites)] = True
        pairs = np.array(sorted(x * _PAIR_SHIFT + j for x, j in self.pairs), dtype=np.int64)
        thin_p = np.array([p for p, _ in self.thinning], dtype=np.float64)
        thin_k = np.array([k for _, k in self.thinning], dtype=np.uint64)
        return bool(self.everywhere_), sites, pairs, thin_p, thin_k


@dataclass(frozen=True)
class Instruction:
    kind: str  # "jump", "sleep" or "neutral"
    target: int = -1
    direction: int = -1

    def __str__(self):
        return f"jump:{self.target}" if self.kind == "jump" else self.kind


class InstructionTape:
    """The array of instructions ``tau^{x,j}`` (``j >= 1``) for one run.

    Values are a pure function of ``(seed, x, j)``; reads are also memoized per
    site. Masked views returned by :meth:`masked` share the memo, so unmasked
    positions read identically through every view.
    """

    def __init__(self, graph, lam, seed, mask=None, _cache=None):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        self.graph = graph
        self.lam = float(lam)
        self.seed = int(seed)
        self.key = _prf.derive(seed, _prf.TAPE)
        self.mask = mask if mask is not None else SleepMask()
        self._cache = {} if _cache is None else _cache
        self._kernel = None

    @property
    def sleep_prob(self):
        return self.lam / (1.0 + self.lam)

    def raw(self, x, j):
        """Unmasked instruction code at ``(x, j)``."""
        if j < 1:
            raise ValueError("instruction indices start at 1")
        row = self._cache.setdefault(x, [])
        if j > len(row):
            k = self.graph.n_directions
            sp = self.sleep_prob
            key = np.uint64(self.key)
            for i in range(len(row) + 1, j + 1):
                u = float(uniform(key, x, i))
                if u < sp:
                    row.append(SLEEP)
                else:
                    row.append(min(int((u - sp) / (1.0 - sp) * k), k - 1))
        return row[j - 1]

    def code(self, x, j):
        c = self.raw(x, j)
        if c == SLEEP and not self.mask.is_empty() and self.mask(x, j):
            return NEUTRAL
        return c

    def read(self, x, j):
        c = self.code(x, j)
        if c == SLEEP:
            return Instruction("sleep")
        if c == NEUTRAL:
            return Instruction("neutral")
        return Instruction("jump", int(self.graph.jump[x, c]), c)

    def masked(self, mask):
        return InstructionTape(self.graph, self.lam, self.seed, self.mask | mask, self._cache)

    def kernel_tape(self):
        if self._kernel is None:
            sp = self.sleep_prob
            self._kernel = (np.uint64(self.key), sp) + self.mask.kernel_parts(self.graph.n)
        return self._kernel


def read_instruction(tape, x, j):
    return tape.read(x, j)


def apply_sleep_mask(tape, mask):
    """View of ``tape`` with sleeps turned neutral wherever ``mask`` holds."""
    return tape.masked(mask)


def dump_tape(tape, odometer, path):
    """Write the consumed part of the tape as CSV rows ``site,index,instruction``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "index", "instruction"])
        for x in np.flatnonzero(odometer):
            for j in range(1, int(odometer[x]) + 1):
                w.writerow([int(x), j, str(tape.read(int(x), j))])


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------

@dataclass
class ParticleConfig:
    """Site states over the ball plus the count of particles lost to the exterior."""

    state: np.ndarray
    absorbed: int = 0
    initial: int = field(default=-1)

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.int64)
        if self.initial < 0:
            self.initial = self.n_particles() + self.absorbed

    @classmethod
    def from_counts(cls, counts, sleeping=()):
        """Active particle counts per site; sites in ``sleeping`` hold one sleeper."""
        counts = np.asarray(counts, dtype=np.int64)
        state = np.where(counts > 0, counts + 1, 0)
        for s in sleeping:
            if counts[s] != 0:
                raise ValueError("a sleeping site cannot also hold active particles")
            state[s] = SLEEPING
        return cls(state)

    def counts(self):
        s = self.state
        return np.where(s >= 2, s - 1, s)

    def n_particles(self):
        return int(self.counts().sum())

    def mass(self):
        """Particles in the ball plus absorbed ones; constant under toppling."""
        return self.n_particles() + self.absorbed

    def sleeping(self):
        return self.state == SLEEPING

    def unstable(self):
        return self.state >= 2

    def is_stable(self, K=None):
        u = self.unstable()
        return not (u[K].any() if K is not None else u.any())

    def copy(self):
        return ParticleConfig(self.state.copy(), self.absorbed, self.initial)

    def __le__(self, other):
        return bool(np.all(self.state <= other.state))


def init_config(g, params, seed):
    """i.i.d. initial occupation of every site of ``g``, all particles active."""
    state = np.zeros(g.n, dtype=np.int64)
    key = np.uint64(_prf.derive(seed, _prf.CONFIG))
    _init_k(state, key, float(params.mu), params.init is InitDist.SHIFTED_GEOMETRIC)
    return ParticleConfig(state)


@dataclass
class ToppleOutcome:
    instruction: Instruction
    index: int
    target: int = -1
    absorbed: bool = False
    legal: bool = True


def topple(config, odometer, tape, x, enforce_legal=True):
    """Apply the toppling operator at ``x``: use ``tau^{x, h(x)+1}`` and bump ``h(x)``.

    An illegal topple (``x`` stable) raises :class:`IllegalTopple` when
    ``enforce_legal`` is set, and is otherwise a no-op that leaves ``h``
    unchanged.
    """
    s = config.state
    if s[x] < 2:
        if enforce_legal:
            raise IllegalTopple(f"site {x} is stable ({state_name(s[x])})")
        return ToppleOutcome(Instruction("neutral"), int(odometer[x]), legal=False)
    j = int(odometer[x]) + 1
    odometer[x] = j
    ins = tape.read(x, j)
    out = ToppleOutcome(ins, j)
    if ins.kind == "jump":
        s[x] = 0 if s[x] == 2 else s[x] - 1
        y = ins.target
        out.target = y
        if y < 0:
            config.absorbed += 1
            out.absorbed = True
        else:
            s[y] = 2 if s[y] == EMPTY else 3 if s[y] == SLEEPING else s[y] + 1
    elif ins.kind == "sleep" and s[x] == 2:
        s[x] = SLEEPING
    return out


class Context:
    """A single run's mutable ``(config, odometer, tape)`` triple.

    ``budget`` caps the total number of tape reads made by procedures run on
    this context. Contexts are not meant to be shared between threads.
    """

    def __init__(self, graph, config, tape, odometer=None, budget=10**9):
        self.graph = graph
        self.config = config
        self.tape = tape
        self.odometer = (np.zeros(graph.n, dtype=np.int64) if odometer is None
                         else np.asarray(odometer, dtype=np.int64))
        self.budget = int(budget)

    @classmethod
    def fresh(cls, graph, params, seed, mask=None, budget=10**9):
        """Context with the initial configuration and tape both derived from ``seed``."""
        tape = InstructionTape(graph, params.lam, seed, mask)
        return cls(graph, init_config(graph, params, seed), tape, budget=budget)

    def copy(self):
        return Context(self.graph, self.config.copy(), self.tape, self.odometer.copy(),
                       self.budget)
