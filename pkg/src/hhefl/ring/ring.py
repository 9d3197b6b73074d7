"""Elements of the negacyclic ring R_q = Z_q[X]/(X^N + 1) in RNS form."""

from __future__ import annotations

import struct

import numpy as np

from hhefl.errors import FormatError, ParameterError
from hhefl.ring import _kernels as K
from hhefl.ring.modulus import CoefficientModulus

_HEADER = struct.Struct("<IHB")


# -- raw stacked-array helpers (rows are residue polynomials, k rows per element)


def _rows(arr: np.ndarray, mod: CoefficientModulus) -> np.ndarray:
    # a reshape of a non-contiguous array would copy and drop the in-place result
    if not arr.flags.c_contiguous or not arr.flags.writeable:
        raise ValueError("in-place transforms need a writeable C-contiguous array")
    return arr.reshape(-1, mod.n)


def forward_inplace(arr: np.ndarray, mod: CoefficientModulus) -> np.ndarray:
    flat = _rows(arr, mod)
    K.ntt_forward_rows(flat, mod.pidx(flat.shape[0]), mod.fwd, mod.fwd_shoup, mod.qs)
    return arr


def inverse_inplace(arr: np.ndarray, mod: CoefficientModulus) -> np.ndarray:
    flat = _rows(arr, mod)
    K.ntt_inverse_rows(flat, mod.pidx(flat.shape[0]), mod.inv, mod.inv_shoup, mod.qs, mod.n_inv, mod.n_inv_shoup)
    return arr


def _binary(kernel, a: np.ndarray, b: np.ndarray, mod: CoefficientModulus, *extra) -> np.ndarray:
    shape = a.shape
    fa = a.reshape(-1, mod.n)
    out = kernel(fa, b.reshape(-1, mod.n), mod.pidx(fa.shape[0]), mod.qs, *extra)
    return out.reshape(shape)


def add_raw(a, b, mod):
    return _binary(K.add_rows, a, b, mod)


def sub_raw(a, b, mod):
    return _binary(K.sub_rows, a, b, mod)


def mul_raw(a, b, mod):
    return _binary(K.mul_rows, a, b, mod, mod.mus)


def neg_raw(a, mod):
    fa = a.reshape(-1, mod.n)
    return K.neg_rows(fa, mod.pidx(fa.shape[0]), mod.qs).reshape(a.shape)


def scalar_mul_raw(a, scalar: int, mod):
    s = np.array([scalar % q for q in mod.primes], dtype=np.uint64)
    fa = a.reshape(-1, mod.n)
    return K.mul_scalar_rows(fa, s, mod.pidx(fa.shape[0]), mod.qs, mod.mus).reshape(a.shape)


class RingElement:
    """A polynomial of degree < N with residues modulo every prime of a chain.

    ``coeffs`` has shape (k, N); row i holds the residues modulo ``primes[i]``.
    ``is_ntt`` marks evaluation (NTT) representation.  Instances are immutable.
    """

    __slots__ = ("coeffs", "modulus", "is_ntt")

    def __init__(self, coeffs: np.ndarray, modulus: CoefficientModulus, is_ntt: bool = False):
        coeffs = np.asarray(coeffs, dtype=np.uint64)
        if coeffs.shape != (len(modulus), modulus.n):
            raise ParameterError(f"expected shape {(len(modulus), modulus.n)}, got {coeffs.shape}")
        coeffs.setflags(write=False)
        self.coeffs = coeffs
        self.modulus = modulus
        self.is_ntt = bool(is_ntt)

    # -- constructors

    @classmethod
    def zero(cls, modulus: CoefficientModulus, is_ntt: bool = False) -> "RingElement":
        return cls(np.zeros((len(modulus), modulus.n), dtype=np.uint64), modulus, is_ntt)

    @classmethod
    def from_ints(cls, values, modulus: CoefficientModulus) -> "RingElement":
        """Coefficient-domain element from (possibly negative) integers."""
        values = list(values) if not isinstance(values, np.ndarray) else values
        if len(values) > modulus.n:
            raise ParameterError(f"{len(values)} coefficients exceed degree {modulus.n}")
        padded = np.zeros(modulus.n, dtype=object)
        padded[: len(values)] = [int(v) for v in values]
        return cls(modulus.reduce(padded), modulus)

    @classmethod
    def monomial(cls, power: int, modulus: CoefficientModulus, coeff: int = 1) -> "RingElement":
        n = modulus.n
        sign = -1 if (power // n) % 2 else 1
        values = [0] * n
        values[power % n] = sign * coeff
        return cls.from_ints(values, modulus)

    # -- representation

    @property
    def n(self) -> int:
        return self.modulus.n

    def to_ntt(self) -> "RingElement":
        return ntt_forward(self) if not self.is_ntt else self

    def to_coeff(self) -> "RingElement":
        return ntt_inverse(self) if self.is_ntt else self

    def to_ints(self, centered: bool = True) -> list[int]:
        return [int(x) for x in self.modulus.crt_lift(self.to_coeff().coeffs, centered=centered)]

    # -- arithmetic

    def _check(self, other: "RingElement") -> None:
        if not isinstance(other, RingElement):
            raise TypeError(f"cannot combine RingElement with {type(other).__name__}")
        if other.modulus != self.modulus:
            raise ParameterError("ring elements have different parameters")
        if other.is_ntt != self.is_ntt:
            raise ParameterError("ring elements are in different representations")

    def __add__(self, other: "RingElement") -> "RingElement":
        self._check(other)
        return RingElement(add_raw(self.coeffs, other.coeffs, self.modulus), self.modulus, self.is_ntt)

    def __sub__(self, other: "RingElement") -> "RingElement":
        self._check(other)
        return RingElement(sub_raw(self.coeffs, other.coeffs, self.modulus), self.modulus, self.is_ntt)

    def __neg__(self) -> "RingElement":
        return RingElement(neg_raw(self.coeffs, self.modulus), self.modulus, self.is_ntt)

    def __mul__(self, other: "RingElement") -> "RingElement":
        return ring_mul(self, other)

    def scale(self, scalar: int) -> "RingElement":
        return RingElement(scalar_mul_raw(self.coeffs, scalar, self.modulus), self.modulus, self.is_ntt)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RingElement)
            and self.modulus == other.modulus
            and self.is_ntt == other.is_ntt
            and np.array_equal(self.coeffs, other.coeffs)
        )

    def __hash__(self):
        return hash((self.modulus, self.is_ntt, self.coeffs.tobytes()))

    def __repr__(self) -> str:
        dom = "ntt" if self.is_ntt else "coeff"
        return f"RingElement(N={self.n}, k={len(self.modulus)}, {dom})"

    # -- wire format: N (u32), modulus count (u16), domain flag (u8), then
    # little-endian u64 residues, one prime after another

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.n, len(self.modulus), 1 if self.is_ntt else 0)
        return head + self.coeffs.astype("<u8").tobytes()

    @staticmethod
    def serialized_size(modulus: CoefficientModulus) -> int:
        return _HEADER.size + 8 * len(modulus) * modulus.n

    @classmethod
    def from_bytes(cls, data: bytes, modulus: CoefficientModulus, offset: int = 0) -> tuple["RingElement", int]:
        """Parse one element starting at ``offset``; returns (element, new offset)."""
        if len(data) - offset < _HEADER.size:
            raise FormatError("truncated ring element header")
        n, k, flag = _HEADER.unpack_from(data, offset)
        if n != modulus.n or k != len(modulus):
            raise FormatError(f"ring element is (N={n}, k={k}), expected (N={modulus.n}, k={len(modulus)})")
        if flag not in (0, 1):
            raise FormatError(f"bad domain flag {flag}")
        start = offset + _HEADER.size
        end = start + 8 * n * k
        if len(data) < end:
            raise FormatError("truncated ring element body")
        arr = np.frombuffer(data, dtype="<u8", count=n * k, offset=start).astype(np.uint64).reshape(k, n)
        if np.any(arr >= modulus.qs[:, None]):
            raise FormatError("residue out of range")
        return cls(arr, modulus, bool(flag)), end


def ntt_forward(a: RingElement) -> RingElement:
    if a.is_ntt:
        raise ParameterError("ntt_forward needs a coefficient-domain element")
    out = np.array(a.coeffs, order="C", copy=True)
    return RingElement(forward_inplace(out, a.modulus), a.modulus, True)


def ntt_inverse(a: RingElement) -> RingElement:
    if not a.is_ntt:
        raise ParameterError("ntt_inverse needs an NTT-domain element")
    out = np.array(a.coeffs, order="C", copy=True)
    return RingElement(inverse_inplace(out, a.modulus), a.modulus, False)


def ring_mul(a: RingElement, b: RingElement) -> RingElement:
    """a * b mod (X^N + 1, q); the result keeps the representation of a."""
    if not isinstance(b, RingElement) or a.modulus != b.modulus:
        raise ParameterError("ring_mul operands have different parameters")
    prod = mul_raw(a.to_ntt().coeffs, b.to_ntt().coeffs, a.modulus)
    out = RingElement(prod, a.modulus, True)
    return out if a.is_ntt else ntt_inverse(out)
