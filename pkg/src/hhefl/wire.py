"""Message envelope and payload encodings shared by every transport.

Frame: type (u8), round (u32), payload length (u64), payload.  All integers
are little-endian.  Ciphertexts and keys inside payloads use the HHEF object
format, each prefixed by a u64 length.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import BfvCiphertext
from hhefl.bfv.serialize import (
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    eval_keys_from_bytes,
    eval_keys_to_bytes,
    public_key_from_bytes,
    public_key_to_bytes,
    secret_key_from_bytes,
    secret_key_to_bytes,
)
from hhefl.errors import FormatError
from hhefl.field import P
from hhefl.pasta import PastaKey, PastaVariant, SymCiphertextChunk

HEADER = struct.Struct("<BIQ")
MAX_PAYLOAD = 1 << 34


class MsgType(enum.IntEnum):
    KEYS = 1
    GLOBAL_PLAIN = 2
    GLOBAL_CT = 3
    UPDATE = 4
    EVAL_REPORT = 5
    SELECT = 6
    ABORT = 7


@dataclass(frozen=True)
class Message:
    type: MsgType
    round: int
    payload: bytes = b""

    def to_bytes(self) -> bytes:
        return HEADER.pack(self.type, self.round, len(self.payload)) + self.payload

    @property
    def wire_size(self) -> int:
        return HEADER.size + len(self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Message":
        kind, rnd, length = parse_header(data[: HEADER.size])
        if len(data) != HEADER.size + length:
            raise FormatError(f"frame announces {length} payload bytes, carries {len(data) - HEADER.size}")
        return cls(kind, rnd, bytes(data[HEADER.size :]))


def parse_header(head: bytes) -> tuple[MsgType, int, int]:
    if len(head) != HEADER.size:
        raise FormatError("truncated frame header")
    kind, rnd, length = HEADER.unpack(head)
    try:
        kind = MsgType(kind)
    except ValueError:
        raise FormatError(f"unknown message type {kind}") from None
    if length > MAX_PAYLOAD:
        raise FormatError(f"payload length {length} exceeds the frame limit")
    return kind, rnd, length


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated payload")
        out = self.data[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob(self) -> bytes:
        (n,) = self.unpack("<Q")
        return self.take(n)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing payload bytes")


def _blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _field_array(values) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


def _read_field_array(r: _Reader, count: int) -> np.ndarray:
    v = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
    if np.any(v >= P):
        raise FormatError("field element out of range")
    return v


# -- keys


class KeyRole(enum.IntEnum):
    ANNOUNCE = 0
    SERVER = 1
    CLIENT = 2


def encode_announce(client_id: int) -> bytes:
    return struct.pack("<BI", KeyRole.ANNOUNCE, client_id)


def encode_server_keys(share) -> bytes:
    return struct.pack("<BI", KeyRole.SERVER, 0) + _blob(public_key_to_bytes(share.public)) + _blob(eval_keys_to_bytes(share.eval_keys))


def encode_client_keys(share) -> bytes:
    pasta = np.asarray(share.pasta_key.values, dtype="<u4").tobytes()
    return (
        struct.pack("<BI", KeyRole.CLIENT, share.client_id)
        + _blob(public_key_to_bytes(share.public))
        + _blob(secret_key_to_bytes(share.secret))
        + _blob(pasta)
    )


def decode_keys(data: bytes, params: BfvParams):
    """Returns (role, client_id, share or None)."""
    from hhefl.protocol import ClientKeyShare, ServerKeyShare

    r = _Reader(data)
    role, cid = r.unpack("<BI")
    try:
        role = KeyRole(role)
    except ValueError:
        raise FormatError(f"unknown key role {role}") from None
    share = None
    if role is KeyRole.SERVER:
        pk = public_key_from_bytes(r.blob(), params)
        share = ServerKeyShare(pk, eval_keys_from_bytes(r.blob(), params))
    elif role is KeyRole.CLIENT:
        pk = public_key_from_bytes(r.blob(), params)
        sk = secret_key_from_bytes(r.blob(), params)
        pasta = np.frombuffer(r.blob(), dtype="<u4").astype(np.int64)
        share = ClientKeyShare(cid, pk, sk, PastaKey(pasta))
    r.done()
    return role, cid, share


# -- model weights in the clear


def encode_plain_weights(weights) -> bytes:
    parts = [struct.pack("<H", len(weights))]
    for w in weights:
        w = np.asarray(w, dtype="<f4")
        parts.append(struct.pack(f"<B{w.ndim}I", w.ndim, *w.shape))
        parts.append(w.tobytes())
    return b"".join(parts)


def decode_plain_weights(data: bytes) -> list[np.ndarray]:
    r = _Reader(data)
    (count,) = r.unpack("<H")
    out = []
    for _ in range(count):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        out.append(np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape))
    r.done()
    return out


# -- updates

_MODE_CODES = {"plain": 0, "bfv": 1, "hhe": 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}
_UPDATE_HEAD = struct.Struct("<BIIII")


@dataclass(frozen=True)
class UpdateSizes:
    """Byte split of an encoded update: weights payload, key payload and the rest."""

    weights: int
    key: int
    total: int


def encode_update(u) -> tuple[bytes, UpdateSizes]:
    mode = _MODE_CODES[u.mode]
    if u.mode == "plain":
        body = _field_array(u.values)
        count, key = u.values.size, b""
        weights = len(body)
    elif u.mode == "bfv":
        blobs = [ciphertext_to_bytes(c) for c in u.ciphertexts]
        weights = sum(len(b) for b in blobs)
        body = b"".join(_blob(b) for b in blobs)
        count, key = len(blobs), b""
    else:
        body = b"".join(c.to_bytes() for c in u.chunks)
        weights = len(body)
        count = len(u.chunks)
        key = ciphertext_to_bytes(u.sk_he)
    data = _UPDATE_HEAD.pack(mode, u.client_id, u.round, u.n_k, count) + body + (_blob(key) if key else b"")
    return data, UpdateSizes(weights, len(key), len(data))


def decode_update(data: bytes, params: BfvParams, variant: PastaVariant):
    from hhefl.protocol import ClientUpdate

    r = _Reader(data)
    mode, cid, rnd, n_k, count = r.unpack(_UPDATE_HEAD.format)
    if mode not in _MODE_NAMES:
        raise FormatError(f"unknown update mode {mode}")
    if n_k < 1:
        raise FormatError("update with n_k = 0")
    name = _MODE_NAMES[mode]
    u = ClientUpdate(cid, rnd, n_k, name)
    if name == "plain":
        u.values = _read_field_array(r, count)
    elif name == "bfv":
        u.ciphertexts = [ciphertext_from_bytes(r.blob(), params) for _ in range(count)]
    else:
        size = SymCiphertextChunk.wire_size(variant.t)
        u.chunks = [SymCiphertextChunk.from_bytes(r.take(size), variant.t)[0] for _ in range(count)]
        u.sk_he = ciphertext_from_bytes(r.blob(), params)
    r.done()
    u.__post_init__()  # re-check chunk counters now that they are attached
    return u


# -- aggregates

_AGG_HEAD = struct.Struct("<BIIHIIH")


def encode_aggregate(agg) -> bytes:
    lay = agg.layout
    width, lanes, stride = (lay.width, lay.lanes, lay.stride) if lay else (0, 0, 0)
    head = _AGG_HEAD.pack(_MODE_CODES[agg.mode], agg.n, agg.length, width, lanes, stride, len(agg.contributors))
    ids = struct.pack(f"<{len(agg.contributors)}I", *agg.contributors)
    if agg.values is not None:
        body = struct.pack("<I", agg.values.size) + _field_array(agg.values)
    else:
        body = struct.pack("<I", len(agg.ciphertexts)) + b"".join(_blob(ciphertext_to_bytes(c)) for c in agg.ciphertexts)
    return head + ids + body


def decode_aggregate(data: bytes, params: BfvParams):
    from hhefl.protocol import AggregateResult, SlotLayout

    r = _Reader(data)
    mode, n, length, width, lanes, stride, n_ids = r.unpack(_AGG_HEAD.format)
    if mode not in _MODE_NAMES:
        raise FormatError(f"unknown aggregate mode {mode}")
    ids = r.unpack(f"<{n_ids}I")
    (count,) = r.unpack("<I")
    layout = SlotLayout(width, lanes, stride) if width else None
    if _MODE_NAMES[mode] == "plain":
        agg = AggregateResult("plain", n, ids, length, layout, values=_read_field_array(r, count))
    else:
        cts = [ciphertext_from_bytes(r.blob(), params) for _ in range(count)]
        agg = AggregateResult(_MODE_NAMES[mode], n, ids, length, layout, ciphertexts=cts)
    r.done()
    return agg


# -- small control messages

_REPORT = struct.Struct("<IddI")


def encode_report(rep) -> bytes:
    return _REPORT.pack(rep.client_id, rep.accuracy, rep.loss, rep.count)


def decode_report(data: bytes):
    from hhefl.protocol import EvalReport

    if len(data) != _REPORT.size:
        raise FormatError("evaluation report has the wrong size")
    return EvalReport(*_REPORT.unpack(data))


class Phase(enum.IntEnum):
    TRAIN = 1
    EVALUATE = 2
    FINISH = 3


def encode_select(phase: Phase, ids, model_follows: bool = False) -> bytes:
    """Phase, whether a model frame follows, and the selected client ids."""
    ids = list(ids)
    return struct.pack(f"<BBI{len(ids)}I", phase, int(model_follows), len(ids), *ids)


def decode_select(data: bytes) -> tuple[Phase, bool, list[int]]:
    r = _Reader(data)
    phase, follows, count = r.unpack("<BBI")
    ids = list(r.unpack(f"<{count}I"))
    r.done()
    if follows > 1:
        raise FormatError(f"bad model flag {follows}")
    try:
        return Phase(phase), bool(follows), ids
    except ValueError:
        raise FormatError(f"unknown phase {phase}") from None


def ciphertext_bytes(ct: BfvCiphertext) -> int:
    return len(ciphertext_to_bytes(ct))
