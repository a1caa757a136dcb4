"""SplitMix64 seed mixing and streams usable from both Python and numba code.

State is a one-element uint64 array so compiled kernels can advance it in place.
"""
import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def mix_seed(seed, index):
    """Derive an independent 64-bit seed for substream ``index`` of ``seed``."""
    s = np.uint64(seed)
    i = np.uint64(index)
    return _mix(s ^ _mix(i * _GAMMA + _GAMMA))


@njit(cache=True)
def next_u64(state):
    state[0] += _GAMMA
    return _mix(state[0])


@njit(cache=True)
def next_below(state, n):
    """Integer in ``[0, n)`` via the high 53 bits."""
    u = next_u64(state) >> np.uint64(11)
    r = np.int64(np.float64(u) * (1.0 / 9007199254740992.0) * n)
    return min(r, n - 1)


def new_state(seed) -> np.ndarray:
    return np.array([int(seed) & _MASK], dtype=np.uint64)


def as_seed(seed) -> int:
    return int(seed) & _MASK
