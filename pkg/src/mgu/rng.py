"""Counter-based SplitMix64 random streams.

Every random draw in the package comes from here so that sequences are a
pure function of ``(seed, tags, counter)`` and can be replicated outside
numpy. Draw ``i`` of a stream with key ``k`` is ``mix64(k + (i + 1) * GOLDEN)``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(x: int) -> int:
    return int(mix64(np.array([x & _MASK], dtype=np.uint64))[0])


def derive(seed: int, *tags: int | str) -> int:
    """Derive a child stream key from a seed and a sequence of tags.

    String tags are folded in byte by byte so the derivation does not depend
    on Python's salted ``hash``.
    """
    key = _mix_int((seed & _MASK) + int(GOLDEN))
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode("utf-8"):
                key = _mix_int((key ^ b) + int(GOLDEN))
            key = _mix_int(key + 0xFF)
        else:
            key = _mix_int((key ^ (int(tag) & _MASK)) + int(GOLDEN))
    return key


class Stream:
    """A sequential view over one counter-based stream."""

    def __init__(self, seed: int, *tags: int | str):
        self.key = np.uint64(derive(seed, *tags))
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.key + idx * GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes ``2 * ceil(n / 2)`` draws."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation: stable argsort of ``n`` raw 64-bit keys."""
        return np.argsort(self.raw(n), kind="stable")

    def choice(self, items: np.ndarray, k: int) -> np.ndarray:
        """``k`` distinct items, uniformly, in draw order."""
        items = np.asarray(items)
        if k > len(items):
            raise ValueError(f"cannot choose {k} of {len(items)} items")
        return items[self.permutation(len(items))[:k]]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in ``[0, high)``; multiply-shift on the uniform draw."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
