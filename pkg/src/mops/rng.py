"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)``: the 64-bit key
is derived from seed and stream, and the ``counter``-th output is the
SplitMix64 finalizer applied to ``key + (counter + 1) * golden``.  Agents get
independent reproducible streams by using distinct stream ids, and any draw
can be recomputed without replaying the ones before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STREAM_MULT = 0xD1B54A32D192ED03
_TWO_PI = 2.0 * np.pi

# stream-id purposes; the low 16 bits carry an agent index
STREAM_PARAMS = 1
STREAM_SAMPLING = 2
STREAM_DATA_TRAIN = 3
STREAM_DATA_POP = 4
STREAM_GENERATOR = 5
STREAM_TOY_NOISE = 6
STREAM_SHARED_INIT = 7
STREAM_TEST = 15


def stream_id(purpose: int, index: int = 0) -> int:
    return (purpose << 16) | (index & 0xFFFF)


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64 without warnings
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_key(seed: int, stream: int) -> int:
    return _mix_int(_mix_int(seed) ^ ((stream * _STREAM_MULT) & _MASK))


def raw_u64(seed: int, stream: int, start: int, n: int) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the stream as uint64."""
    key = np.uint64(derive_key(seed, stream))
    counters = np.arange(n, dtype=np.uint64) + np.uint64((start + 1) & _MASK)
    return _mix_array(counters * np.uint64(_GOLDEN) + key)


def _to_unit(raw: np.ndarray) -> np.ndarray:
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass
class RngState:
    """A single-owner cursor into one counter-based stream."""

    seed: int
    stream: int = 0
    counter: int = 0

    def spawn(self, stream: int) -> "RngState":
        return RngState(self.seed, stream, 0)

    def uniform(self, size: int | None = None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(size)
        u = _to_unit(raw_u64(self.seed, self.stream, self.counter, n))
        self.counter += n
        out = low + (high - low) * u
        return float(out[0]) if size is None else out

    def normal(self, size: int | None = None, scale: float = 1.0):
        # Box-Muller: each gaussian consumes two consecutive uniforms
        n = 1 if size is None else int(size)
        u = _to_unit(raw_u64(self.seed, self.stream, self.counter, 2 * n))
        self.counter += 2 * n
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(_TWO_PI * u2)
        z *= scale
        return float(z[0]) if size is None else z

    def integers(self, high: int, size: int | None = None):
        """Uniform integers in ``[0, high)``."""
        n = 1 if size is None else int(size)
        u = _to_unit(raw_u64(self.seed, self.stream, self.counter, n))
        self.counter += n
        k = np.minimum((u * high).astype(np.int64), high - 1)
        return int(k[0]) if size is None else k


def prng_draw(state: RngState, kind: str) -> float:
    if kind == "uniform":
        return state.uniform()
    if kind == "gaussian":
        return state.normal()
    raise ValueError(f"unknown draw kind {kind!r}")
