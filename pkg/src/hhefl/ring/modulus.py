"""NTT-friendly primes, coefficient moduli and per-prime transform tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import prod

import numpy as np

from hhefl.errors import ParameterError

# every prime below is congruent to 1 modulo this, which supports N <= 16384
PRIME_STRIDE = 1 << 15
MAX_PRIME_BITS = 31


def is_prime(n: int) -> bool:
    from sympy import isprime

    return bool(isprime(n))


@lru_cache(maxsize=None)
def ntt_primes(bits: int, count: int, stride: int = PRIME_STRIDE, skip: int = 0) -> tuple[int, ...]:
    """The ``count`` largest primes below ``2**bits`` congruent to 1 mod ``stride``,
    after discarding the first ``skip`` such primes."""
    if bits > MAX_PRIME_BITS:
        raise ParameterError(f"primes above {MAX_PRIME_BITS} bits are not supported")
    found: list[int] = []
    c = ((1 << bits) - 2) // stride
    while len(found) < count + skip:
        if c <= 0:
            raise ParameterError(f"not enough {bits}-bit primes = 1 mod {stride}")
        q = c * stride + 1
        if is_prime(q):
            found.append(q)
        c -= 1
    return tuple(found[skip:])


def _bit_reverse(x: int, bits: int) -> int:
    return int(format(x, f"0{bits}b")[::-1], 2) if bits else 0


@lru_cache(maxsize=None)
def bit_reverse_table(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def primitive_root_2n(q: int, n: int) -> int:
    """Smallest-generator primitive 2n-th root of unity modulo prime q."""
    if (q - 1) % (2 * n):
        raise ParameterError(f"{q} has no primitive {2 * n}-th root of unity")
    for g in range(2, q):
        if pow(g, (q - 1) // 2, q) == q - 1:
            psi = pow(g, (q - 1) // (2 * n), q)
            if pow(psi, n, q) == q - 1:
                return psi
    raise ParameterError(f"no 2n-th root found modulo {q}")


@dataclass(frozen=True)
class PrimeTables:
    """Twiddles for one prime at one ring degree."""

    q: int
    n: int
    psi: int
    fwd: np.ndarray
    fwd_shoup: np.ndarray
    inv: np.ndarray
    inv_shoup: np.ndarray
    n_inv: int
    n_inv_shoup: int
    barrett: int


def barrett_constant(q: int) -> int:
    """floor(4**b / q) for a b-bit modulus (the kernels' reduction constant)."""
    return (1 << (2 * q.bit_length())) // q


@lru_cache(maxsize=None)
def prime_tables(q: int, n: int, psi: int | None = None) -> PrimeTables:
    if psi is None:
        psi = primitive_root_2n(q, n)
    rev = bit_reverse_table(n)
    psi_inv = pow(psi, -1, q)
    pw = np.empty(n, dtype=object)
    ipw = np.empty(n, dtype=object)
    cur, icur = 1, 1
    for i in range(n):
        pw[i] = cur
        ipw[i] = icur
        cur = cur * psi % q
        icur = icur * psi_inv % q
    fwd = np.array([pw[r] for r in rev], dtype=np.uint64)
    inv = np.array([ipw[r] for r in rev], dtype=np.uint64)
    fwd_s = np.array([(int(w) << 32) // q for w in fwd], dtype=np.uint64)
    inv_s = np.array([(int(w) << 32) // q for w in inv], dtype=np.uint64)
    n_inv = pow(n, -1, q)
    for arr in (fwd, inv, fwd_s, inv_s):
        arr.setflags(write=False)
    return PrimeTables(q, n, psi, fwd, fwd_s, inv, inv_s, n_inv, (n_inv << 32) // q, barrett_constant(q))


@dataclass(frozen=True, eq=False)
class CoefficientModulus:
    """An ordered chain of distinct word-sized primes, each = 1 (mod 2N)."""

    primes: tuple[int, ...]
    n: int
    tables: tuple[PrimeTables, ...] = field(repr=False, compare=False)

    # stacked arrays for the kernels
    qs: np.ndarray = field(repr=False, compare=False)
    mus: np.ndarray = field(repr=False, compare=False)
    fwd: np.ndarray = field(repr=False, compare=False)
    fwd_shoup: np.ndarray = field(repr=False, compare=False)
    inv: np.ndarray = field(repr=False, compare=False)
    inv_shoup: np.ndarray = field(repr=False, compare=False)
    n_inv: np.ndarray = field(repr=False, compare=False)
    n_inv_shoup: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def build(cls, primes, n: int) -> "CoefficientModulus":
        primes = tuple(int(q) for q in primes)
        if n < 2 or n & (n - 1):
            raise ParameterError(f"ring degree {n} is not a power of two")
        if len(set(primes)) != len(primes):
            raise ParameterError("coefficient primes must be distinct")
        for q in primes:
            if q >= 1 << MAX_PRIME_BITS:
                raise ParameterError(f"prime {q} exceeds {MAX_PRIME_BITS} bits")
            if (q - 1) % (2 * n):
                raise ParameterError(f"prime {q} is not 1 mod 2N={2 * n}")
        tables = tuple(prime_tables(q, n) for q in primes)
        stack = lambda name: np.ascontiguousarray(np.stack([getattr(t, name) for t in tables]))
        arrays = dict(
            qs=np.array(primes, dtype=np.uint64),
            mus=np.array([t.barrett for t in tables], dtype=np.uint64),
            fwd=stack("fwd"),
            fwd_shoup=stack("fwd_shoup"),
            inv=stack("inv"),
            inv_shoup=stack("inv_shoup"),
            n_inv=np.array([t.n_inv for t in tables], dtype=np.uint64),
            n_inv_shoup=np.array([t.n_inv_shoup for t in tables], dtype=np.uint64),
        )
        return cls(primes=primes, n=n, tables=tables, **arrays)

    def __len__(self) -> int:
        return len(self.primes)

    def __eq__(self, other) -> bool:
        return isinstance(other, CoefficientModulus) and self.primes == other.primes and self.n == other.n

    def __hash__(self) -> int:
        return hash((self.primes, self.n))

    @property
    def product(self) -> int:
        return prod(self.primes)

    @property
    def bit_length(self) -> int:
        return self.product.bit_length()

    def pidx(self, rows: int) -> np.ndarray:
        """Prime index per row for a stack of ``rows // k`` RNS polynomials."""
        k = len(self.primes)
        return np.tile(np.arange(k, dtype=np.int64), rows // k)

    def reduce(self, values) -> np.ndarray:
        """Residues of signed integer coefficients, shape (k, N)."""
        v = np.asarray(values)
        if v.dtype == object:
            return np.stack([np.array([int(x) % q for x in v], dtype=np.uint64) for q in self.primes])
        v = v.astype(np.int64)
        return np.stack([np.mod(v, q).astype(np.uint64) for q in self.primes])

    def crt_lift(self, residues: np.ndarray, centered: bool = True) -> np.ndarray:
        """Exact integer coefficients (object array) from residues (k, N)."""
        big = self.product
        acc = np.zeros(residues.shape[1], dtype=object)
        for i, q in enumerate(self.primes):
            qhat = big // q
            y = (residues[i].astype(object) * pow(qhat % q, -1, q)) % q
            acc = acc + y * qhat
        acc = acc % big
        if centered:
            acc = np.where(acc > big // 2, acc - big, acc)
        return acc
