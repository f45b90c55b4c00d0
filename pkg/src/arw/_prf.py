"""Counter-based pseudorandom function shared by every random draw in the package.

Each draw is a pure function of ``(key, a, b)``; nothing carries state between
calls. That makes instruction tapes fixed random objects independent of the
order in which they are read, and makes any trial replayable from its key.
"""
import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_ONE = np.uint64(1)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# stream tags used when deriving sub-keys
TRIAL = 1
TAPE = 2
CONFIG = 3
GHOST = 4
WALK = 5
ORDER = 6
BRANCH = 7
MASK = 8


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def hash3(key, a, b):
    """64-bit hash of ``(key, a, b)``; ``a`` and ``b`` must be non-negative."""
    h = _mix64(np.uint64(key) + _GOLDEN * (np.uint64(a) + _ONE))
    return _mix64(h ^ (np.uint64(b) * _M2 + _GOLDEN))


@njit(cache=True, nogil=True)
def uniform(key, a, b):
    """Uniform double in [0, 1) determined by ``(key, a, b)``."""
    return np.float64(hash3(key, a, b) >> _S11) * _INV53


def derive(key, tag, index=0):
    """Sub-key for stream ``tag``, item ``index`` of ``key`` (Python ints in and out)."""
    return int(hash3(np.uint64(int(key) & _MASK), int(tag), int(index)))


def trial_key(master, i):
    return derive(master, TRIAL, i)


def trial_keys(master, n):
    """Array of per-trial keys ``derive(master, TRIAL, i)`` for ``i < n``."""
    return np.array([trial_key(master, i) for i in range(n)], dtype=np.uint64)
