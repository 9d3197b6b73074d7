"""Real-valued model weights <-> F_p vectors.

Client side: flatten, clip to [-alpha, alpha], scale by 127/alpha and round
half away from zero, store negatives as p + x, pad to whole chunks.  After
aggregation: lift sums back to signed integers, divide by the total batch
count and undo the scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hhefl.errors import ParameterError, ProtocolError
from hhefl.field import P


@dataclass(frozen=True)
class QuantSpec:
    alpha: float = 5.0
    bits: int = 8
    chunk: int = 32

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError("clip bound alpha must be positive")
        if not 2 <= self.bits <= 16 or self.chunk < 1:
            raise ParameterError("invalid bit width or chunk size")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def scale_factor(self) -> float:
        return self.qmax / self.alpha


def flatten(weights) -> np.ndarray:
    """Layer-major, row-major concatenation."""
    if not weights:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([np.asarray(w, dtype=np.float32).ravel() for w in weights])


def unflatten(v, shapes, chunk: int | None = None) -> list[np.ndarray]:
    """Inverse of :func:`flatten`.  With ``chunk`` set, a zero tail that pads
    the vector to a multiple of ``chunk`` is accepted and dropped."""
    v = np.asarray(v)
    sizes = [int(np.prod(s)) for s in shapes]
    total = sum(sizes)
    allowed = total if chunk is None else -(-total // chunk) * chunk
    if v.size != total and v.size != allowed:
        raise ParameterError(f"vector of length {v.size} does not match {total} parameters")
    out, pos = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(v[pos : pos + size].astype(np.float32).reshape(shape))
        pos += size
    return out


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(v, spec: QuantSpec) -> np.ndarray:
    """q_i = round(clip(v_i, -alpha, alpha) * scale_factor) as int64 in [-qmax, qmax]."""
    x = np.clip(np.asarray(v, dtype=np.float64), -spec.alpha, spec.alpha)
    return round_half_away(x * spec.scale_factor).astype(np.int64)


def pad(q, chunk: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    return np.pad(q, (0, (-q.size) % chunk))


def encode_unsigned(q, p: int = P) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    return np.where(q < 0, p + q, q)


def decode_centered(x, p: int = P) -> np.ndarray:
    """Residues above p // 2 (strictly) map to x - p."""
    x = np.asarray(x, dtype=np.int64) % p
    return np.where(x > p // 2, x - p, x)


def average_dequantize(sums, n: int, spec: QuantSpec) -> np.ndarray:
    if n <= 0:
        raise ProtocolError("cannot average over zero batches")
    return np.asarray(sums, dtype=np.float64) / n / spec.scale_factor


def encode_weights(weights, spec: QuantSpec) -> np.ndarray:
    """Flatten, quantize, pad to whole chunks and map into [0, p)."""
    return encode_unsigned(pad(quantize(flatten(weights), spec), spec.chunk))


def decode_weights(field_sums, n: int, shapes, spec: QuantSpec) -> list[np.ndarray]:
    """Aggregated field sums back to float32 tensors."""
    vals = average_dequantize(decode_centered(field_sums), n, spec)
    return unflatten(vals, shapes, chunk=spec.chunk)
