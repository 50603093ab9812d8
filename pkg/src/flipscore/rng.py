"""Reproducible Rademacher sign flips.

Signs come from a Philox counter-based generator keyed by the master
seed. Flip ``j`` owns the counter blocks ``j * B .. (j + 1) * B - 1`` with
``B = ceil(n / 256)``, and observation ``i`` takes bit ``i mod 256`` of
block ``j * B + i // 256``. Any flip (or range of flips) can therefore be
regenerated on its own, in any order, and gives the same signs as a
sequential pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

_BITS_PER_BLOCK = 256
_WORDS_PER_BLOCK = 4


def philox_key(seed):
    """Map a non-negative integer seed to a 128-bit Philox key."""
    seed = int(seed)
    if seed < 0:
        raise ConfigurationError("seed must be non-negative")
    return np.random.SeedSequence(seed).generate_state(2, np.uint64)


def rademacher_block(seed, n, start, stop):
    """Signs for flips ``start .. stop - 1`` as a float array of shape
    ``(stop - start, n)``. Flip 0 is the identity."""
    if stop <= start:
        return np.empty((0, n))
    blocks = -(-n // _BITS_PER_BLOCK)
    lo = max(start, 1)
    out = np.empty((stop - start, n))
    if start == 0:
        out[0] = 1.0
    if stop > lo:
        counter = np.zeros(4, dtype=np.uint64)
        pos = lo * blocks
        counter[0] = pos & 0xFFFFFFFFFFFFFFFF
        counter[1] = pos >> 64
        bitgen = np.random.Philox(key=philox_key(seed), counter=counter)
        raw = bitgen.random_raw((stop - lo) * blocks * _WORDS_PER_BLOCK)
        bits = np.unpackbits(
            raw.astype("<u8").view(np.uint8).reshape(stop - lo, -1), axis=1, bitorder="little"
        )[:, :n]
        out[lo - start :] = 1.0 - 2.0 * bits
    return out


@dataclass(frozen=True)
class FlipPlan:
    """``g`` sign-flip vectors of length ``n``; index 0 is the identity.

    Either seed-driven (signs generated lazily, block by block) or built
    from an explicit matrix with :meth:`from_array`.
    """

    n: int
    g: int
    seed: int = 0
    explicit: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.g < 2:
            raise ConfigurationError(f"need at least 2 flips, got g={self.g}")
        if self.n < 1:
            raise ConfigurationError("flip length must be positive")
        if self.explicit is None and not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")

    @classmethod
    def from_array(cls, flips):
        flips = np.asarray(flips, dtype=float)
        if flips.ndim != 2:
            raise ConfigurationError("flip matrix must be 2-D (g, n)")
        if not np.all(np.abs(flips) == 1):
            raise ConfigurationError("flip entries must be -1 or +1")
        flips = flips.copy()
        flips.setflags(write=False)
        return cls(n=flips.shape[1], g=flips.shape[0], seed=0, explicit=flips)

    def block(self, start, stop):
        stop = min(stop, self.g)
        if self.explicit is not None:
            return self.explicit[start:stop]
        return rademacher_block(self.seed, self.n, start, stop)

    def flip(self, j):
        if not 0 <= j < self.g:
            raise IndexError(j)
        return self.block(j, j + 1)[0]

    def blocks(self, size=None):
        """Yield ``(start, flips)`` chunks that cap memory near 32 MB."""
        if size is None:
            size = max(1, min(self.g, 4_000_000 // self.n))
        for start in range(0, self.g, size):
            yield start, self.block(start, start + size)

    @property
    def flips(self):
        """All flips as a ``(g, n)`` array of +-1."""
        return self.block(0, self.g)
