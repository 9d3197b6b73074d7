"""CRT slot batching of F_p vectors into R_p = Z_p[X]/(X^N + 1).

Slot order.  With psi = 3**((p - 1) / 2N) mod p (3 generates F_p^*), slot j
of row 0 holds m(psi**(3**j mod 2N)) and slot j of row 1 holds
m(psi**(-3**j mod 2N)), for j < N/2.  The Galois map X -> X**(3**k) then
rotates both rows left by k, independently.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from hhefl.errors import CapacityError, ParameterError
from hhefl.field import P
from hhefl.ring import _kernels as K
from hhefl.ring.modulus import bit_reverse_table, prime_tables

GENERATOR = 3


@lru_cache(maxsize=None)
def slot_to_ntt_index(n: int) -> np.ndarray:
    """Position, in the bit-reversed NTT output, of every slot."""
    two_n = 2 * n
    rev = bit_reverse_table(n)
    half = n // 2
    idx = np.empty(n, dtype=np.int64)
    pos = 1
    for j in range(half):
        idx[j] = rev[(pos - 1) // 2]
        idx[half + j] = rev[(two_n - pos - 1) // 2]
        pos = pos * GENERATOR % two_n
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def galois_element(step: int, n: int) -> int:
    """Galois exponent that rotates rows left by ``step``; step None-like 'swap' uses 2N-1."""
    return pow(GENERATOR, step % (n // 2), 2 * n)


@lru_cache(maxsize=None)
def ntt_automorphism_perm(galois: int, n: int) -> np.ndarray:
    """perm with NTT(sigma(a))[i] = NTT(a)[perm[i]] for sigma: X -> X**galois."""
    if galois % 2 == 0:
        raise ParameterError("Galois elements are odd")
    rev = bit_reverse_table(n)
    two_n = 2 * n
    exps = 2 * rev + 1
    target = (galois * exps) % two_n
    perm = rev[(target - 1) // 2]
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=None)
def coeff_automorphism(galois: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(destination index, sign) with sigma(a)[dest[i]] = sign[i] * a[i]."""
    i = np.arange(n, dtype=np.int64)
    e = (i * galois) % (2 * n)
    dest = np.where(e < n, e, e - n)
    sign = np.where(e < n, 1, -1)
    return dest, sign


def _plain_tables(n: int):
    t = prime_tables(P, n)
    qs = np.array([P], dtype=np.uint64)
    pidx = np.zeros(1, dtype=np.int64)
    return t, qs, pidx


def batch_encode(values, n: int) -> np.ndarray:
    """Coefficients in [0, p) of the plaintext polynomial whose slots are ``values``.

    Vectors shorter than N are zero-padded (row 0 first, then row 1).
    """
    v = np.asarray(values, dtype=np.int64)
    if v.ndim != 1:
        raise ParameterError("batch_encode expects a flat vector")
    if v.size > n:
        raise CapacityError(f"{v.size} values exceed the {n} available slots")
    slots = np.zeros(n, dtype=np.uint64)
    slots[: v.size] = np.mod(v, P).astype(np.uint64)
    evals = np.empty(n, dtype=np.uint64)
    evals[slot_to_ntt_index(n)] = slots
    t, qs, pidx = _plain_tables(n)
    row = evals.reshape(1, n)
    K.ntt_inverse_rows(
        row, pidx, t.inv.reshape(1, n), t.inv_shoup.reshape(1, n), qs,
        np.array([t.n_inv], dtype=np.uint64), np.array([t.n_inv_shoup], dtype=np.uint64),
    )
    return row[0]


def batch_decode(coeffs, n: int | None = None) -> np.ndarray:
    """Slot values (int64 in [0, p)) of a plaintext polynomial with coefficients mod p."""
    c = np.mod(np.asarray(coeffs, dtype=np.int64), P).astype(np.uint64)
    n = c.size if n is None else n
    t, qs, pidx = _plain_tables(n)
    row = c.reshape(1, n).copy()
    K.ntt_forward_rows(row, pidx, t.fwd.reshape(1, n), t.fwd_shoup.reshape(1, n), qs)
    return row[0][slot_to_ntt_index(n)].astype(np.int64)


class SlotVector:
    """N field elements viewed as two rows of N/2 slots."""

    __slots__ = ("values",)

    def __init__(self, values, n: int | None = None):
        v = np.mod(np.asarray(values, dtype=np.int64), P)
        if n is not None:
            if v.size > n:
                raise CapacityError(f"{v.size} values exceed the {n} available slots")
            v = np.concatenate([v, np.zeros(n - v.size, dtype=np.int64)])
        v.setflags(write=False)
        self.values = v

    @property
    def n(self) -> int:
        return self.values.size

    def rows(self) -> tuple[np.ndarray, np.ndarray]:
        h = self.n // 2
        return self.values[:h], self.values[h:]

    def rotate(self, step: int) -> "SlotVector":
        """Left-rotate each row by ``step`` (the plaintext oracle for he_rotate)."""
        r0, r1 = self.rows()
        return SlotVector(np.concatenate([np.roll(r0, -step), np.roll(r1, -step)]))

    def encode(self) -> np.ndarray:
        return batch_encode(self.values, self.n)

    @classmethod
    def decode(cls, coeffs) -> "SlotVector":
        return cls(batch_decode(coeffs))

    def __eq__(self, other) -> bool:
        return isinstance(other, SlotVector) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        head = ", ".join(str(x) for x in self.values[:6])
        return f"SlotVector(n={self.n}, [{head}, ...])"
