"""PASTA: an HE-friendly stream cipher over F_p (p = 65537).

Each block is keyed by a 2t-element key and a (nonce, counter) pair.  The
per-block round material (two t x t matrices and two constant vectors per
affine layer) is squeezed from SHAKE128, so client and server derive it
independently.  Keystream for a block:

    state = (k_L, k_R)
    for j in 0 .. r-1: affine(j), then Feistel S-box (cube S-box when j = r-1)
    affine(r); output the left half

and a chunk is encrypted as c = m + keystream mod p.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from hhefl import field as F
from hhefl.errors import ChunkSizeError, FormatError, ParameterError
from hhefl.field import P

XOF_DOMAIN = b"PASTA"
_DRAW_MASK = (1 << 17) - 1


@dataclass(frozen=True)
class PastaVariant:
    name: str
    t: int
    rounds: int

    def __post_init__(self):
        if self.t < 2 or self.rounds < 3:
            raise ParameterError("PASTA needs t >= 2 and at least three rounds")

    @property
    def key_size(self) -> int:
        return 2 * self.t

    @classmethod
    def named(cls, name: str) -> "PastaVariant":
        try:
            return VARIANTS[name.lower()]
        except KeyError:
            raise ParameterError(f"unknown PASTA variant {name!r}; choose from {sorted(VARIANTS)}") from None


PASTA3 = PastaVariant("pasta-3", 128, 3)
PASTA4 = PastaVariant("pasta-4", 32, 4)
VARIANTS = {"pasta-3": PASTA3, "pasta-4": PASTA4}


@dataclass(frozen=True)
class BlockNonce:
    """128-bit nonce plus 64-bit block counter."""

    nonce: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.nonce < 1 << 128 or not 0 <= self.counter < 1 << 64:
            raise ParameterError("nonce is 128 bits and counter 64 bits")

    @classmethod
    def for_round(cls, round_index: int, client_id: int, counter: int = 0) -> "BlockNonce":
        return cls((round_index << 64) | client_id, counter)

    def at(self, counter: int) -> "BlockNonce":
        return BlockNonce(self.nonce, counter)

    def xof_seed(self) -> bytes:
        return XOF_DOMAIN + self.nonce.to_bytes(16, "big") + self.counter.to_bytes(8, "big")


@dataclass(frozen=True, eq=False)
class PastaKey:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = F.reduce(self.values)
        if v.ndim != 1 or v.size % 2:
            raise ParameterError("a PASTA key is an even-length vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def generate(cls, variant: PastaVariant, rng: np.random.Generator) -> "PastaKey":
        return cls(rng.integers(0, P, size=variant.key_size, dtype=np.int64))

    @property
    def t(self) -> int:
        return self.values.size // 2

    def __eq__(self, other) -> bool:
        return isinstance(other, PastaKey) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


class FieldSampler:
    """Uniform F_p elements from SHAKE128 by rejection on 17-bit draws.

    Each draw consumes 8 bytes read big-endian and masked to 17 bits; draws
    >= p are discarded.
    """

    def __init__(self, seed: bytes):
        self._xof = hashlib.shake_128(seed)
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0
        self._squeezed = 0

    def _refill(self, need: int) -> None:
        # squeeze a larger prefix and keep only the fresh tail
        nbytes = self._squeezed + max(need * 16, 512) * 8
        raw = self._xof.digest(nbytes)[self._squeezed :]
        self._squeezed = nbytes
        draws = (np.frombuffer(raw, dtype=">u8") & _DRAW_MASK).astype(np.int64)
        fresh = draws[draws < P]
        self._buf = np.concatenate([self._buf[self._pos :], fresh])
        self._pos = 0

    def take(self, count: int) -> np.ndarray:
        while self._buf.size - self._pos < count:
            self._refill(count)
        out = self._buf[self._pos : self._pos + count]
        self._pos += count
        return out

    def take_nonzero_first(self, count: int) -> np.ndarray:
        first = self.take(1)
        while first[0] == 0:
            first = self.take(1)
        return np.concatenate([first, self.take(count - 1)])


def matrix_from_row(first_row: np.ndarray) -> np.ndarray:
    """t x t matrix whose row i follows row_i[j] = r[j] * row_{i-1}[t-1] + row_{i-1}[j-1]."""
    r = np.asarray(first_row, dtype=np.int64)
    t = r.size
    m = np.empty((t, t), dtype=np.int64)
    m[0] = r
    for i in range(1, t):
        prev = m[i - 1]
        row = r * prev[t - 1]
        row[1:] += prev[:-1]
        m[i] = row % P
    return m


@dataclass(frozen=True, eq=False)
class RoundMaterial:
    """Matrices (layers, t, t) and constants (layers, t) for both halves."""

    ml: np.ndarray = field(repr=False)
    mr: np.ndarray = field(repr=False)
    cl: np.ndarray = field(repr=False)
    cr: np.ndarray = field(repr=False)

    @property
    def layers(self) -> int:
        return self.ml.shape[0]

    @property
    def t(self) -> int:
        return self.ml.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, RoundMaterial) and all(
            np.array_equal(a, b) for a, b in zip((self.ml, self.mr, self.cl, self.cr), (other.ml, other.mr, other.cl, other.cr))
        )

    @classmethod
    def identity(cls, t: int, layers: int) -> "RoundMaterial":
        eye = np.broadcast_to(np.eye(t, dtype=np.int64), (layers, t, t)).copy()
        zero = np.zeros((layers, t), dtype=np.int64)
        return cls(eye, eye.copy(), zero, zero.copy())


def derive_round_material(nonce: BlockNonce, variant: PastaVariant) -> RoundMaterial:
    """Per layer, in stream order: first row of M_L, first row of M_R, c_L, c_R."""
    return _material(nonce.xof_seed(), variant.t, variant.rounds)


@lru_cache(maxsize=4096)
def _material(seed: bytes, t: int, rounds: int) -> RoundMaterial:
    sampler = FieldSampler(seed)
    layers = rounds + 1
    ml = np.empty((layers, t, t), dtype=np.int64)
    mr = np.empty_like(ml)
    cl = np.empty((layers, t), dtype=np.int64)
    cr = np.empty_like(cl)
    for j in range(layers):
        ml[j] = matrix_from_row(sampler.take_nonzero_first(t))
        mr[j] = matrix_from_row(sampler.take_nonzero_first(t))
        cl[j] = sampler.take(t)
        cr[j] = sampler.take(t)
    for a in (ml, mr, cl, cr):
        a.setflags(write=False)
    return RoundMaterial(ml, mr, cl, cr)


# -- round functions


def mix(y_l, y_r) -> tuple[np.ndarray, np.ndarray]:
    """(2 y_L + y_R, y_L + 2 y_R) mod p."""
    y_l = np.asarray(y_l, dtype=np.int64)
    y_r = np.asarray(y_r, dtype=np.int64)
    s = y_l + y_r
    return (y_l + s) % P, (y_r + s) % P


def affine_layer(state, layer: int, material: RoundMaterial) -> np.ndarray:
    state = np.asarray(state, dtype=np.int64)
    t = material.t
    if state.size != 2 * t:
        raise ParameterError(f"state has {state.size} elements, expected {2 * t}")
    y_l = (F.matvec(material.ml[layer], state[:t]) + material.cl[layer]) % P
    y_r = (F.matvec(material.mr[layer], state[t:]) + material.cr[layer]) % P
    return np.concatenate(mix(y_l, y_r))


def sbox_feistel(half) -> np.ndarray:
    """x'_0 = x_0, x'_i = x_i + x_{i-1}^2."""
    x = np.asarray(half, dtype=np.int64) % P
    out = x.copy()
    out[1:] = (x[1:] + x[:-1] * x[:-1]) % P
    return out


def sbox_cube(half) -> np.ndarray:
    x = np.asarray(half, dtype=np.int64) % P
    return x * x % P * x % P


def keystream_block(key: PastaKey, nonce: BlockNonce, variant: PastaVariant, material: RoundMaterial | None = None) -> np.ndarray:
    t = variant.t
    if key.values.size != 2 * t:
        raise ParameterError(f"key has {key.values.size} elements, variant needs {2 * t}")
    mat = derive_round_material(nonce, variant) if material is None else material
    state = key.values
    for j in range(variant.rounds):
        state = affine_layer(state, j, mat)
        sbox = sbox_cube if j == variant.rounds - 1 else sbox_feistel
        state = np.concatenate([sbox(state[:t]), sbox(state[t:])])
    state = affine_layer(state, variant.rounds, mat)
    return state[:t]


# -- chunks


@dataclass(frozen=True, eq=False)
class SymCiphertextChunk:
    values: np.ndarray = field(repr=False)
    counter: int

    _COUNTER = struct.Struct("<Q")

    def __eq__(self, other) -> bool:
        return isinstance(other, SymCiphertextChunk) and self.counter == other.counter and np.array_equal(self.values, other.values)

    def __len__(self) -> int:
        return self.values.size

    def to_bytes(self) -> bytes:
        return self._COUNTER.pack(self.counter) + np.asarray(self.values, dtype="<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, t: int, offset: int = 0) -> tuple["SymCiphertextChunk", int]:
        end = offset + cls.wire_size(t)
        if len(data) < end:
            raise FormatError("truncated symmetric chunk")
        (counter,) = cls._COUNTER.unpack_from(data, offset)
        vals = np.frombuffer(data, dtype="<u8", count=t, offset=offset + 8).astype(np.int64)
        if np.any(vals >= P):
            raise FormatError("chunk element out of field range")
        return cls(vals, counter), end

    @staticmethod
    def wire_size(t: int) -> int:
        return 8 + 8 * t


def _check_chunk(values, t: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    if v.ndim != 1 or v.size != t:
        raise ChunkSizeError(f"chunk has {v.size} elements, expected {t}")
    return v


def sym_encrypt(m, key: PastaKey, nonce: BlockNonce, variant: PastaVariant) -> SymCiphertextChunk:
    m = _check_chunk(m, variant.t)
    ks = keystream_block(key, nonce, variant)
    return SymCiphertextChunk((m + ks) % P, nonce.counter)


def sym_decrypt(chunk: SymCiphertextChunk, key: PastaKey, nonce: BlockNonce, variant: PastaVariant) -> np.ndarray:
    c = _check_chunk(chunk.values, variant.t)
    ks = keystream_block(key, nonce.at(chunk.counter), variant)
    return (c - ks) % P


def encrypt_vector(values, key: PastaKey, nonce: BlockNonce, variant: PastaVariant) -> list[SymCiphertextChunk]:
    """Split a padded vector into t-element chunks with counters 0, 1, ..."""
    v = np.asarray(values, dtype=np.int64)
    t = variant.t
    if v.size % t:
        raise ChunkSizeError(f"vector length {v.size} is not a multiple of {t}")
    return [sym_encrypt(v[i * t : (i + 1) * t], key, nonce.at(i), variant) for i in range(v.size // t)]


def decrypt_vector(chunks, key: PastaKey, nonce: BlockNonce, variant: PastaVariant) -> np.ndarray:
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([sym_decrypt(c, key, nonce, variant) for c in chunks])
