"""Counter-based random streams usable inside numba kernels.

Every pixel update draws from a stream keyed by ``(seed, x, y, t)`` so the
result does not depend on how pixels are scheduled across threads.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def stream_key(seed, x, y, t):
    """Derive a stream state from integer coordinates."""
    h = _mix(np.uint64(seed) + _GOLDEN)
    h = _mix(h ^ (np.uint64(x + 1) * _M1))
    h = _mix(h ^ (np.uint64(y + 1) * _M2))
    h = _mix(h ^ (np.uint64(t + 2) * _GOLDEN))
    return h


@njit(cache=True, inline="always")
def next_uniform(state):
    """Advance ``state`` (a 1-element uint64 array) and return a double in [0, 1)."""
    state[0] = state[0] + _GOLDEN
    return np.float64(_mix(state[0]) >> _S11) * _INV53


def state_from_generator(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.integers(0, 2**63, dtype=np.uint64)], dtype=np.uint64)
