"""Counter-based random streams.

Draws are a pure function of ``(seed, sweep, step, index)`` so any split of
the index range across workers reproduces the same numbers.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def stream_key(seed: int, sweep: int, step: int) -> np.uint64:
    k = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for part in (sweep, step):
        k = _splitmix64(np.array([k ^ np.uint64(part & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64))[0]
    return k


def uniforms(seed: int, sweep: int, step: int, index: np.ndarray) -> np.ndarray:
    """One U[0, 1) draw per entry of ``index`` (53-bit resolution)."""
    key = stream_key(seed, sweep, step)
    with np.errstate(over="ignore"):
        x = np.asarray(index, dtype=np.uint64) * _GOLDEN ^ key
    x = _splitmix64(_splitmix64(x))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(seed: int, sweep: int, step: int) -> np.random.Generator:
    """A Philox generator keyed by ``(seed, sweep, step)`` for small serial draws."""
    key = np.random.SeedSequence([seed, sweep, step]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
