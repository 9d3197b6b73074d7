"""Seeded randomness.

Every random choice in the toolkit comes from a :class:`numpy.random.Generator`
built here.  A seed (an int up to 256 bits, bytes, or a tuple of those that
is hashed into one) is expanded by
:class:`numpy.random.SeedSequence` into a PCG64DXSM state; independent
sub-streams are labelled with short tags so the same seed always yields the
same keys, noise and data regardless of call order elsewhere.  ``None`` draws
fresh entropy from the operating system.
"""

from __future__ import annotations

import hashlib

import numpy as np

Seed = int | bytes | tuple | None


def _entropy(seed: Seed) -> int | None:
    if seed is None:
        return None
    if isinstance(seed, tuple):
        return int.from_bytes(hashlib.sha256(repr(seed).encode()).digest(), "big")
    if isinstance(seed, bytes):
        return int.from_bytes(seed, "big")
    if seed < 0:
        raise ValueError("seeds are non-negative")
    return int(seed)


def make_rng(seed: Seed = None, *labels) -> np.random.Generator:
    """Generator for ``seed`` on the sub-stream named by ``labels``."""
    entropy = _entropy(seed)
    if labels:
        tag = hashlib.sha256("/".join(str(x) for x in labels).encode()).digest()
        spawn_key = tuple(int.from_bytes(tag[i : i + 4], "big") for i in range(0, 16, 4))
    else:
        spawn_key = ()
    ss = np.random.SeedSequence(entropy, spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64DXSM(ss))


def ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, size=n, dtype=np.int64)


def centered_binomial(rng: np.random.Generator, n: int, eta: int = 21) -> np.ndarray:
    """Centered binomial noise, variance eta/2 (sigma ~ 3.24 for eta = 21)."""
    return rng.binomial(2 * eta, 0.5, size=n).astype(np.int64) - eta


def uniform_residues(rng: np.random.Generator, primes, n: int, shape=()) -> np.ndarray:
    """Uniform residues, last two axes (prime, coefficient)."""
    cols = [rng.integers(0, q, size=shape + (n,), dtype=np.uint64) for q in primes]
    return np.stack(cols, axis=-2)
