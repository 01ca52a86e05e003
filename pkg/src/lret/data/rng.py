"""SplitMix64 generator and the epoch shuffle built on it.

Seeding rule (stable across implementations, all arithmetic mod 2**64)::

    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    stream state for (seed, key) = mix64(seed ^ ((key + 1) * 0x9E3779B97F4A7C15))
    next():  state += 0x9E3779B97F4A7C15; return mix64(state)

The epoch order is a Fisher-Yates shuffle of ``range(n)`` drawing
``j = next() % (i + 1)`` for ``i = n-1 .. 1`` from the stream keyed by the
epoch.  The modulo bias is below 2**-40 for any realistic n.
"""

from __future__ import annotations

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def derive_state(seed: int, key: int) -> int:
    return mix64((seed & MASK) ^ (((key + 1) * GAMMA) & MASK))


class SplitMix64:
    def __init__(self, seed: int, key: int = 0):
        self.state = derive_state(seed, key)

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def below(self, n: int) -> int:
        return self.next_u64() % n

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates; returns ``items`` for chaining."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def shuffle_indices(n: int, seed: int, epoch: int) -> list[int]:
    return SplitMix64(seed, epoch).shuffle(list(range(n)))
