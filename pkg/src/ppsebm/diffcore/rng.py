"""Seeded random streams.

Every stream is a NumPy ``Generator`` driven by the PCG64 bit generator
(PCG XSL RR 128/64), whose output sequence is fixed by its algorithm and is
identical on every platform. Streams are addressed by a path of names: the
seed plus the path is hashed (BLAKE2b, 64-bit digest) into the
``SeedSequence`` spawn key, so adding a new consumer never shifts the draws
of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("gaussian", "uniform", "categorical", "permutation")


def _key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class Rng:
    """A 64-bit seed plus a namespace, exposing one substream per draw kind."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gens: dict[str, np.random.Generator] = {}

    def child(self, *names) -> "Rng":
        """An independent namespace below this one."""
        return Rng(self.seed, self.path + tuple(str(n) for n in names))

    def _gen(self, stream: str) -> np.random.Generator:
        g = self._gens.get(stream)
        if g is None:
            keys = tuple(_key(p) for p in self.path + (stream,))
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=keys)
            g = self._gens[stream] = np.random.Generator(np.random.PCG64(ss))
        return g

    def gaussian(self, shape) -> np.ndarray:
        return self._gen("gaussian").standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen("uniform").uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen("uniform").integers(low, high, shape)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One draw per row of a (..., K) probability array (inverse CDF)."""
        probs = np.asarray(probs, dtype=np.float64)
        u = self._gen("categorical").random(probs.shape[:-1])
        cdf = np.cumsum(probs, axis=-1)
        cdf[..., -1] = np.inf
        return np.argmax(cdf > u[..., None], axis=-1)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen("permutation").permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def shuffle(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]
