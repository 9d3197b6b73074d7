"""Homomorphic evaluation of PASTA decryption (transciphering).

Slot layout.  Row 0 of a working ciphertext is cut into lanes of 4t slots.
Lane L carries the 2t-element cipher state of one chunk twice in a row,
[x, x], and row 1 stays zero.  Because the copy follows the original, a row
rotation by 0 <= i < 2t reads x[(r + i) mod 2t] at lane offset r < 2t, so each
affine layer is a diagonal-method product

    out[s] = sum_i d_i[s] * state[s + i],   d_i[4tL + r] = A_L[r][(r + i) mod 2t]

with d_i zero on the copy half, where A_L = Mix * blockdiag(M_L, M_R) is the
chunk's own layer matrix.  One rotation by -2t then restores the copy.
Diagonals are applied baby-step/giant-step: n1 hoisted baby rotations of the
state and n2 giant rotations of the partial sums, with the giant shift
pre-applied to the plaintext diagonals.

The Feistel shift x[s - 1] only crosses a lane boundary at offsets that its
mask zeroes, and the cube is slot-wise, so neither disturbs the layout.  The
final layer keeps only offsets 0..t, which leaves each lane's keystream
truncated in place.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from math import ceil, isqrt

import numpy as np

from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import (
    BfvCiphertext,
    EvaluationKeys,
    Plaintext,
    he_add,
    he_mul_relin,
    he_negate,
    he_plain_add,
    he_plain_mul,
    he_rotate,
    he_rotate_many,
    he_square,
    require_budget,
)
from hhefl.errors import ChunkSizeError, ParameterError, ProtocolError
from hhefl.field import P
from hhefl.pasta import BlockNonce, PastaVariant, RoundMaterial, SymCiphertextChunk, derive_round_material


def bsgs_split(t: int) -> tuple[int, int]:
    """(n1, n2) with n1 = ceil(sqrt(2t)) and n1 * n2 >= 2t."""
    dim = 2 * t
    n1 = isqrt(dim - 1) + 1
    return n1, ceil(dim / n1)


def max_lanes(t: int, row: int) -> int:
    return row // (4 * t)


def _replication_steps(t: int, row: int) -> list[int]:
    steps, width = [], 2 * t
    while width < row:
        steps.append(-width)
        width *= 2
    return steps


def rotation_steps(variant: PastaVariant, params: BfvParams, split: tuple[int, int] | None = None) -> set[int]:
    """Every rotation the evaluator needs: baby and giant steps, the Feistel
    shift and the key-replication doublings (the first of which also restores
    the lane copy after each affine layer)."""
    n1, n2 = split or bsgs_split(variant.t)
    steps = set(range(1, n1)) | {n1 * g for g in range(1, n2)}
    steps |= {-1, *_replication_steps(variant.t, params.row_size)}
    return steps


def layer_matrix(material: RoundMaterial, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Combined 2t x 2t matrix and constant of one affine layer, mix included."""
    ml, mr = material.ml[layer], material.mr[layer]
    cl, cr = material.cl[layer], material.cr[layer]
    a = np.block([[2 * ml, mr], [ml, 2 * mr]]) % P
    c = np.concatenate([2 * cl + cr, cl + 2 * cr]) % P
    return a, c


def lane_offsets(t: int, count: int) -> np.ndarray:
    return 4 * t * np.arange(count)


def pack_lanes(blocks, t: int, row: int) -> np.ndarray:
    """Row-0 vector with block j (at most t values) at the start of lane j."""
    out = np.zeros(row, dtype=np.int64)
    for off, b in zip(lane_offsets(t, len(blocks)), blocks):
        b = np.asarray(b, dtype=np.int64)
        out[off : off + b.size] = b
    return out


def unpack_lanes(row0, t: int, count: int) -> list[np.ndarray]:
    row0 = np.asarray(row0)
    return [row0[off : off + t].astype(np.int64) for off in lane_offsets(t, count)]


@dataclass(eq=False)
class TranscipheredBatch:
    """BFV ciphertext whose lane j holds the plaintext of chunk counters[j]."""

    ciphertext: BfvCiphertext
    counters: tuple[int, ...]
    seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.counters)


@dataclass(eq=False)
class HesdContext:
    """Evaluator state for one client at a time (the loaded encrypted key)."""

    params: BfvParams
    eval_keys: EvaluationKeys
    variant: PastaVariant
    split: tuple[int, int] | None = None
    lanes: int | None = None
    key: BfvCiphertext | None = field(default=None, repr=False)

    def __post_init__(self):
        t, row = self.variant.t, self.params.row_size
        top = max_lanes(t, row)
        if top < 1 or row % (4 * t):
            raise ParameterError(f"a doubled 2t = {2 * t} state does not tile the {row}-slot rows")
        self.lanes = self.lanes or top
        if not 1 <= self.lanes <= top:
            raise ParameterError(f"{self.lanes} lanes requested, rows hold at most {top}")
        if self.eval_keys.relin is None:
            raise ParameterError("HESD needs a relinearization key")
        self.split = self.split or bsgs_split(t)
        n1, n2 = self.split
        if n1 * n2 < 2 * t:
            raise ParameterError(f"BSGS split {self.split} does not cover {2 * t} diagonals")
        missing = [s for s in rotation_steps(self.variant, self.params, self.split) if not self.eval_keys.has_step(s)]
        if missing:
            raise ParameterError(f"evaluation keys lack rotation steps {sorted(missing)}")
        period = np.ones(2 * t, dtype=np.int64)
        period[[0, t]] = 0
        self.feistel_mask = Plaintext(self._row_vector(np.tile(period, row // (2 * t))), self.params)

    def _row_vector(self, row0: np.ndarray) -> np.ndarray:
        return np.concatenate([row0, np.zeros(self.params.row_size, dtype=np.int64)])

    # -- key handling

    def set_encrypted_key(self, sk_he: BfvCiphertext) -> None:
        """Load a client's encrypted PASTA key (2t elements in slots 0..2t,
        zeros elsewhere) and replicate it across the row."""
        if sk_he.params != self.params:
            raise ParameterError("encrypted key was made under different BFV parameters")
        x = sk_he
        for step in _replication_steps(self.variant.t, self.params.row_size):
            x = he_add(x, he_rotate(x, step, self.eval_keys))
        self.key = x

    # -- evaluation

    def _diagonals(self, mats: list[np.ndarray], final: bool) -> np.ndarray:
        """Row vectors d_i, shape (2t, row), of the lane-wise diagonal method."""
        dim = 2 * self.variant.t
        out = np.zeros((dim, self.params.row_size), dtype=np.int64)
        s = np.arange(dim)
        keep = dim // 2 if final else dim
        for off, a in zip(lane_offsets(self.variant.t, len(mats)), mats):
            diags = np.stack([a[s, (s + i) % dim] for i in range(dim)])
            out[:, off : off + keep] = diags[:, :keep]
        return out

    def _affine(self, x: BfvCiphertext, layers: list[tuple[np.ndarray, np.ndarray]], final: bool) -> BfvCiphertext:
        n1, n2 = self.split
        t = self.variant.t
        dim = 2 * t
        diags = self._diagonals([a for a, _ in layers], final)
        babies = he_rotate_many(x, range(n1), self.eval_keys)
        acc = None
        for g in range(n2):
            inner = None
            for b in range(n1):
                i = b + n1 * g
                if i >= dim:
                    break
                d = diags[i]
                if not d.any():
                    continue
                pt = Plaintext(self._row_vector(np.roll(d, n1 * g)), self.params)
                term = he_plain_mul(babies[b], pt)
                inner = term if inner is None else he_add(inner, term)
            if inner is None:
                continue
            if g:
                inner = he_rotate(inner, n1 * g, self.eval_keys)
            acc = inner if acc is None else he_add(acc, inner)
        keep = t if final else dim
        const = pack_lanes([c[:keep] for _, c in layers], t, self.params.row_size)
        acc = he_plain_add(acc, self._row_vector(const))
        if not final:
            acc = he_add(acc, he_rotate(acc, -dim, self.eval_keys))
        return acc

    def _feistel(self, x: BfvCiphertext) -> BfvCiphertext:
        shifted = he_rotate(x, -1, self.eval_keys)
        sq = he_square(shifted, self.eval_keys.relin)
        return he_add(x, he_plain_mul(sq, self.feistel_mask))

    def _cube(self, x: BfvCiphertext) -> BfvCiphertext:
        return he_mul_relin(he_square(x, self.eval_keys.relin), x, self.eval_keys.relin)

    def he_keystream(self, nonces, materials=None) -> BfvCiphertext:
        """Encrypted keystream blocks, block j at the start of lane j."""
        if self.key is None:
            raise ProtocolError("no encrypted key loaded")
        nonces = [nonces] if isinstance(nonces, BlockNonce) else list(nonces)
        if not 1 <= len(nonces) <= self.lanes:
            raise ParameterError(f"{len(nonces)} blocks do not fit {self.lanes} lanes")
        v = self.variant
        if materials is None:
            materials = [derive_round_material(n, v) for n in nonces]
        x = self.key
        for j in range(v.rounds):
            layer = [layer_matrix(m, j) for m in materials]
            x = require_budget(self._affine(x, layer, final=False), f"affine {j}")
            if j < v.rounds - 1:
                x = require_budget(self._feistel(x), f"feistel {j}")
            else:
                x = require_budget(self._cube(x), f"cube {j}")
        layer = [layer_matrix(m, v.rounds) for m in materials]
        return require_budget(self._affine(x, layer, final=True), f"affine {v.rounds}")

    def hesd_batch(self, chunks, nonce: BlockNonce) -> TranscipheredBatch:
        """BFV encryption of m = c - keystream for up to ``lanes`` chunks."""
        t = self.variant.t
        chunks = list(chunks)
        for c in chunks:
            if len(c) != t:
                raise ChunkSizeError(f"chunk has {len(c)} elements, expected {t}")
        start = time.perf_counter()
        ks = self.he_keystream([nonce.at(c.counter) for c in chunks])
        row0 = pack_lanes([c.values for c in chunks], t, self.params.row_size)
        ct = he_plain_add(he_negate(ks), self._row_vector(row0))
        return TranscipheredBatch(ct, tuple(c.counter for c in chunks), time.perf_counter() - start)

    def hesd_block(self, chunk: SymCiphertextChunk, nonce: BlockNonce) -> TranscipheredBatch:
        return self.hesd_batch([chunk], nonce)

    def hesd_chunks(self, chunks, nonce: BlockNonce, sk_he: BfvCiphertext | None = None) -> list[TranscipheredBatch]:
        """Transcipher chunks with counters 0, 1, ... in batches of ``lanes``,
        optionally switching the key first."""
        if sk_he is not None:
            self.set_encrypted_key(sk_he)
        chunks = list(chunks)
        for expect, c in enumerate(chunks):
            if c.counter != expect:
                raise ProtocolError(f"chunk counter gap: expected {expect}, got {c.counter}")
        return [self.hesd_batch(chunks[i : i + self.lanes], nonce) for i in range(0, len(chunks), self.lanes)]


def batch_count(n_chunks: int, lanes: int) -> int:
    return -(-n_chunks // lanes)
