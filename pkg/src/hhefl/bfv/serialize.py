"""Binary files for BFV keys and ciphertexts.

Layout: ``b"HHEF"``, version byte, object-type byte, a little-endian u16
component count, an object-specific header, then each component in the ring
serialization of :meth:`RingElement.to_bytes`.
"""

from __future__ import annotations

import enum
import struct

import numpy as np

from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import (
    BfvCiphertext,
    EvaluationKeys,
    KeySwitchKey,
    PublicKey,
    SecretKey,
    noise_model,
)
from hhefl.errors import FormatError
from hhefl.ring.ring import RingElement

MAGIC = b"HHEF"
VERSION = 1
_HEAD = struct.Struct("<4sBBH")


class ObjectType(enum.IntEnum):
    CIPHERTEXT = 1
    PUBLIC_KEY = 2
    SECRET_KEY = 3
    EVAL_KEYS = 4


def _rings(arrays, params: BfvParams, is_ntt: bool = True) -> bytes:
    mod = params.context.q
    return b"".join(RingElement(np.asarray(a, dtype=np.uint64), mod, is_ntt).to_bytes() for a in arrays)


def _pack(kind: ObjectType, count: int, body: bytes, extra: bytes = b"") -> bytes:
    return _HEAD.pack(MAGIC, VERSION, kind, count) + extra + body


def _unpack(data: bytes, kind: ObjectType) -> tuple[int, int]:
    if len(data) < _HEAD.size:
        raise FormatError("truncated HHEF header")
    magic, version, got, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("not an HHEF object (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported HHEF version {version}")
    if got != kind:
        raise FormatError(f"expected object type {kind.name}, found {got}")
    return count, _HEAD.size


def _read_rings(data: bytes, params: BfvParams, count: int, offset: int) -> tuple[list[np.ndarray], int]:
    mod = params.context.q
    out = []
    for _ in range(count):
        elem, offset = RingElement.from_bytes(data, mod, offset)
        out.append(elem.coeffs)
    return out, offset


def _finish(data: bytes, offset: int) -> None:
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes")


def ciphertext_to_bytes(ct: BfvCiphertext) -> bytes:
    return _pack(ObjectType.CIPHERTEXT, ct.size, _rings(ct.data, ct.params))


def ciphertext_from_bytes(data: bytes, params: BfvParams, noise_bits: float | None = None) -> BfvCiphertext:
    """Parse a ciphertext.  The noise estimate is not on the wire; pass the
    sender's estimate if known, otherwise the fresh-encryption estimate is used."""
    count, off = _unpack(data, ObjectType.CIPHERTEXT)
    comps, off = _read_rings(data, params, count, off)
    _finish(data, off)
    if noise_bits is None:
        noise_bits = noise_model(params).fresh
    try:
        return BfvCiphertext(np.stack(comps), params, noise_bits)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def ciphertext_size(params: BfvParams, size: int = 2) -> int:
    return _HEAD.size + size * RingElement.serialized_size(params.context.q)


def public_key_to_bytes(pk: PublicKey) -> bytes:
    return _pack(ObjectType.PUBLIC_KEY, 2, _rings(pk.data, pk.params))


def public_key_from_bytes(data: bytes, params: BfvParams) -> PublicKey:
    count, off = _unpack(data, ObjectType.PUBLIC_KEY)
    if count != 2:
        raise FormatError("public keys have two components")
    comps, off = _read_rings(data, params, 2, off)
    _finish(data, off)
    return PublicKey(params, np.stack(comps))


_SMALL = struct.Struct("<I")


def secret_key_to_bytes(sk: SecretKey) -> bytes:
    # the ternary coefficients ride along as one signed byte each
    small = sk.small.astype(np.int8).tobytes()
    return _pack(ObjectType.SECRET_KEY, 1, _rings([sk.ntt], sk.params), _SMALL.pack(len(small)) + small)


def secret_key_from_bytes(data: bytes, params: BfvParams) -> SecretKey:
    count, off = _unpack(data, ObjectType.SECRET_KEY)
    if count != 1:
        raise FormatError("secret keys have one component")
    (n_small,) = _SMALL.unpack_from(data, off)
    off += _SMALL.size
    if n_small != params.n or len(data) < off + n_small:
        raise FormatError("secret key coefficient block has the wrong length")
    small = np.frombuffer(data, dtype=np.int8, count=n_small, offset=off).astype(np.int64)
    off += n_small
    comps, off = _read_rings(data, params, 1, off)
    _finish(data, off)
    return SecretKey(params, comps[0], small)


_KEY_HEAD = struct.Struct("<IH")


def eval_keys_to_bytes(keys: EvaluationKeys) -> bytes:
    """Relinearization key (Galois element 1) followed by every rotation key."""
    entries = []
    if keys.relin is not None:
        entries.append((0, keys.relin))
    entries += sorted(keys.galois.items())
    parts = []
    k = len(keys.params.context.q)
    for step, key in entries:
        parts.append(_KEY_HEAD.pack(key.galois, step & 0xFFFF))
        parts.append(_rings(list(key.kb) + list(key.ka), keys.params))
    return _pack(ObjectType.EVAL_KEYS, len(entries), b"".join(parts), struct.pack("<H", k))


def eval_keys_from_bytes(data: bytes, params: BfvParams) -> EvaluationKeys:
    count, off = _unpack(data, ObjectType.EVAL_KEYS)
    (k,) = struct.unpack_from("<H", data, off)
    off += 2
    if k != len(params.context.q):
        raise FormatError("evaluation keys were made for a different modulus chain")
    relin = None
    galois: dict[int, KeySwitchKey] = {}
    for _ in range(count):
        if len(data) < off + _KEY_HEAD.size:
            raise FormatError("truncated key header")
        g, step = _KEY_HEAD.unpack_from(data, off)
        off += _KEY_HEAD.size
        comps, off = _read_rings(data, params, 2 * k, off)
        kb = np.stack(comps[:k]).astype(np.uint32)
        ka = np.stack(comps[k:]).astype(np.uint32)
        key = KeySwitchKey(params, kb, ka, g)
        if g == 1:
            relin = key
        else:
            galois[step - 0x10000 if step >= 0x8000 else step] = key
    _finish(data, off)
    return EvaluationKeys(params, relin, galois)
