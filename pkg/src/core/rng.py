# src/core/rng.py

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _stream_id(stream):
    """Stable 64-bit id for a stream name (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(str(stream).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class CounterRng:
    """
    Seedable counter-based generator.

    Every draw builds a fresh Philox generator from (key, counter) and then advances
    the counter past the blocks it used, so the full state is three plain values
    and any position in a stream can be reproduced without replaying it.
    """

    def __init__(self, seed, stream="root", counter=0):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = str(stream)
        self.counter = int(counter)
        self._key = (self.seed & _MASK64) | (_stream_id(self.stream) << 64)

    def fork(self, *tags):
        """Independent child stream; does not advance this one."""
        suffix = "/".join(str(t) for t in tags)
        return CounterRng(self.seed, f"{self.stream}/{suffix}")

    def _words(self, n):
        gen = np.random.Generator(np.random.Philox(key=self._key, counter=self.counter))
        # Philox emits four 64-bit words per counter value.
        self.counter += (n + 3) // 4 + 1
        return gen

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64):
        n = int(np.prod(shape, dtype=np.int64))
        u = self._words(n).random(n)
        return (low + (high - low) * u).reshape(shape).astype(dtype, copy=False)

    def normal(self, shape, dtype=np.float64):
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self._words(2 * m).random(2 * m)
        u1 = 1.0 - u[:m]
        u2 = u[m:]
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, low, high, size):
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def state(self):
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["stream"], state["counter"])
