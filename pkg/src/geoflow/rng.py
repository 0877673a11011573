"""Counter-based random streams.

All randomness flows through :class:`Stream`, a thin wrapper over the
Philox4x64 counter-based bit generator.  Child streams are keyed by a hash of
``(root_seed, *labels)`` so that any sample, step or ensemble member can be
regenerated independently of the order in which others were drawn.
Gaussian variates use the Box-Muller transform on the stream's uniforms.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

GENERATOR_NAME = "philox4x64"


def _key(root_seed: int, labels: tuple) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", int(root_seed) & 0xFFFFFFFFFFFFFFFF))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return np.frombuffer(h.digest(), dtype="<u8").copy()


class Stream:
    """A reproducible random stream identified by a root seed and labels."""

    def __init__(self, root_seed: int, *labels):
        self.root_seed = int(root_seed)
        self.labels = labels
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.root_seed, labels)))

    def child(self, *labels) -> Stream:
        return Stream(self.root_seed, *self.labels, *labels)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1] keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return mean + std * z[:n].reshape(size)

    def truncated_normal(self, size, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) redrawn until every entry lies within ``bound`` std."""
        out = self.normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        if replace:
            return self._gen.integers(0, n, size=k)
        return self._gen.permutation(n)[:k]

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)
