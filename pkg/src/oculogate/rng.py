"""Deterministic random numbers: xoshiro256** seeded via splitmix64.

One Rng = one stream. Substreams are derived from (seed, label) by folding
the label bytes into a splitmix64 sponge, so per-sample work can run in any
order and still reproduce bit-for-bit. Bulk fills are lane-parallel: each
call burns one draw of the parent stream as a sub-seed, expands it with the
splitmix64 chain into per-lane xoshiro states, and takes one starstar output
per lane (vectorized in uint64).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_INV_2_53 = float(2.0 ** -53)


def _mix64(z):
    """splitmix64 output function; works on uint64 scalars and arrays."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _rotl(x, k: int):
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Rng:
    """xoshiro256** stream with labeled substreams and vectorized fills."""

    def __init__(self, seed: int, label: str = ""):
        with np.errstate(over="ignore"):
            s = _U64(seed & 0xFFFFFFFFFFFFFFFF)
            s = _mix64(s + _GOLDEN)
            for chunk in _label_chunks(label):
                s = _mix64((s ^ chunk) + _GOLDEN)
            # expand the sponge into the 4 state words via the splitmix chain
            idx = np.arange(1, 5, dtype=np.uint64)
            self._state = _mix64(s + idx * _GOLDEN)
            if not self._state.any():  # all-zero state is the one forbidden seed
                self._state = _mix64(_GOLDEN + idx * _GOLDEN)
        self.seed = seed
        self.label = label

    def substream(self, label: str) -> "Rng":
        """Independent stream keyed by (seed, self.label + '/' + label)."""
        full = f"{self.label}/{label}" if self.label else label
        return Rng(self.seed, full)

    def next_u64(self) -> np.uint64:
        """Advance the stream one step (reference xoshiro256** update)."""
        with np.errstate(over="ignore"):
            s0, s1, s2, s3 = self._state
            result = _rotl(s1 * _U64(5), 7) * _U64(9)
            t = s1 << _U64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
            self._state = np.array([s0, s1, s2, s3], dtype=np.uint64)
        return result

    def fill_u64(self, n: int) -> np.ndarray:
        """n uint64s, one starstar output per splitmix-seeded xoshiro lane."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        sub = self.next_u64()
        with np.errstate(over="ignore"):
            idx = np.arange(1, 2 * n + 1, dtype=np.uint64)
            # lane word s1 is the second splitmix output of each lane pair
            s1 = _mix64(sub + idx * _GOLDEN)[1::2]
            return _rotl(s1 * _U64(5), 7) * _U64(9)

    def uniform(self, shape=None) -> np.ndarray | float:
        """U[0, 1) with 53-bit resolution."""
        if shape is None:
            return float(self.next_u64() >> _U64(11)) * _INV_2_53
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.fill_u64(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        """Gaussian variates via Box-Muller on paired uniforms."""
        scalar = shape is None
        shape = (1,) if scalar else ((shape,) if isinstance(shape, int) else tuple(shape))
        n = int(np.prod(shape)) if shape else 1
        m = n + (n & 1)
        raw = self.fill_u64(m)
        # (0, 1] so log() is safe
        u1 = ((raw[: m // 2] >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[m // 2 :] >> _U64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * z.reshape(shape)
        return float(out[0]) if scalar else out

    def integers(self, low: int, high: int, shape=None):
        """Uniform ints in [low, high). Modulo bias is negligible at our ranges."""
        span = high - low
        if span <= 0:
            raise ValueError("high must exceed low")
        if shape is None:
            return low + int(self.next_u64() % _U64(span))
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        vals = (self.fill_u64(n) % _U64(span)).astype(np.int64) + low
        return vals.reshape(shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return self.uniform(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation as the argsort of fresh random keys."""
        return np.argsort(self.fill_u64(n), kind="stable")

    def choice(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to non-negative weights."""
        cum = np.cumsum(np.asarray(weights, dtype=np.float64))
        return int(np.searchsorted(cum, self.uniform() * cum[-1], side="right"))


def _label_chunks(label: str):
    data = label.encode("utf-8")
    for i in range(0, len(data), 8):
        yield _U64(int.from_bytes(data[i : i + 8].ljust(8, b"\0"), "little"))
    yield _U64(len(data))
