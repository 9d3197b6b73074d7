"""The BFV scheme in RNS form.

Ciphertexts are kept in NTT representation modulo Q.  Multiplication lifts
both operands to an auxiliary basis B, tensors exactly over Q*B and rescales
by p/Q (HPS-style), then relinearizes.  Key switching (relinearization and
rotations) decomposes the switched polynomial into one digit per prime of Q.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import log2, sqrt

import numpy as np

from hhefl.bfv.params import BfvParams
from hhefl.errors import DecryptionIntegrityError, MissingKeyError, NoiseBudgetExhausted, ParameterError
from hhefl.field import centered
from hhefl.rand import Seed, centered_binomial, make_rng, ternary, uniform_residues
from hhefl.ring import _kernels as K
from hhefl.ring.batch import SlotVector, batch_decode, batch_encode, galois_element, ntt_automorphism_perm
from hhefl.ring.ring import (
    RingElement,
    add_raw,
    forward_inplace,
    inverse_inplace,
    mul_raw,
    neg_raw,
    scalar_mul_raw,
)

ERROR_ETA = 21
ERROR_SIGMA = sqrt(ERROR_ETA / 2)

# ---------------------------------------------------------------------------
# noise estimate (log2 of the infinity norm of [p * (c0 + c1*s)]_Q)


def _log2sum(a: float, b: float) -> float:
    hi, lo = max(a, b), min(a, b)
    return hi + log2(1 + 2 ** (lo - hi))


def _log2quad(a: float, b: float) -> float:
    # independent noise terms add in quadrature
    hi, lo = max(a, b), min(a, b)
    return hi + 0.5 * log2(1 + 4 ** (lo - hi))


class NoiseModel:
    """Heuristic per-operation noise growth, in bits, calibrated on measured runs."""

    def __init__(self, params: BfvParams):
        n = params.n
        k = len(params.context.q)
        pb = log2(params.plain_modulus)
        # fresh: e1 + e2*s + u*e, each product a sum of ~2N/3 terms of size sigma
        self.fresh = pb + log2(6 * ERROR_SIGMA * (1 + 2 * sqrt(2 * n / 3))) + 6
        self.mult = pb + log2(n) + 0.5
        q_max = max(params.context.q.primes)
        self.keyswitch = pb + log2(6 * ERROR_SIGMA * sqrt(k * n / 12) * q_max) + 2
        self.q_bits = params.context.q_bits
        self.n = n

    def budget(self, noise_bits: float) -> float:
        return max(0.0, self.q_bits - 1 - noise_bits)

    def plain_mul(self, noise_bits: float, coeffs: np.ndarray) -> float:
        c = centered(coeffs).astype(np.float64)
        norm = sqrt(float(np.dot(c, c)))
        if norm == 0:
            return 0.0
        return noise_bits + log2(norm) + 2


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: BfvParams
    ntt: np.ndarray = field(repr=False)  # (k, N) NTT residues of s
    small: np.ndarray = field(repr=False)  # (N,) ternary coefficients


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: BfvParams
    data: np.ndarray = field(repr=False)  # (2, k, N): b = -(a*s + e), a


@dataclass(frozen=True, eq=False)
class KeySwitchKey:
    """Digit keys (b_d, a_d); for Galois keys the arrays are stored pre-permuted
    by the inverse automorphism so rotation needs a single gather."""

    params: BfvParams
    kb: np.ndarray = field(repr=False)  # (k, k, N) uint32
    ka: np.ndarray = field(repr=False)
    galois: int = 1

    @property
    def nbytes(self) -> int:
        return self.kb.nbytes + self.ka.nbytes


@dataclass(frozen=True, eq=False)
class BfvKeySet:
    """HE_pk, HE_sk and HE_eval (relinearization + rotation keys)."""

    params: BfvParams
    public: PublicKey
    secret: SecretKey | None
    relin: KeySwitchKey | None
    galois: dict[int, KeySwitchKey]

    @property
    def rotation_steps(self) -> frozenset[int]:
        return frozenset(self.galois)

    def evaluation_keys(self) -> "EvaluationKeys":
        return EvaluationKeys(self.params, self.relin, dict(self.galois))

    def without_secret(self) -> "BfvKeySet":
        return BfvKeySet(self.params, self.public, None, self.relin, dict(self.galois))


@dataclass(frozen=True, eq=False)
class EvaluationKeys:
    params: BfvParams
    relin: KeySwitchKey | None
    galois: dict[int, KeySwitchKey]

    def has_step(self, step: int) -> bool:
        return _norm_step(step, self.params) in self.galois or _norm_step(step, self.params) == 0

    def galois_key(self, step: int) -> KeySwitchKey:
        key = self.galois.get(_norm_step(step, self.params))
        if key is None:
            raise MissingKeyError(f"no rotation key for step {step}")
        return key


def _norm_step(step: int, params: BfvParams) -> int:
    half = params.row_size
    s = step % half
    return s - half if s > half // 2 else s


def _ntt_small(values: np.ndarray, params: BfvParams) -> np.ndarray:
    arr = params.context.q.reduce(values)
    return forward_inplace(arr, params.context.q)


def _keyswitch_key(target_ntt: np.ndarray, sk: SecretKey, rng, galois: int = 1) -> KeySwitchKey:
    params = sk.params
    mod = params.context.q
    k, n = len(mod), params.n
    a = uniform_residues(rng, mod.primes, n, shape=(k,))  # (digit, prime, N)
    e = np.stack([mod.reduce(centered_binomial(rng, n, ERROR_ETA)) for _ in range(k)])
    forward_inplace(e, mod)
    s_b = np.broadcast_to(sk.ntt, a.shape)
    b = neg_raw(add_raw(mul_raw(a, np.ascontiguousarray(s_b), mod), e, mod), mod)
    for d, q in enumerate(mod.primes):
        b[d, d] = (b[d, d] + target_ntt[d]) % np.uint64(q)
    if galois != 1:
        perm = ntt_automorphism_perm(galois, n)
        bp = np.empty_like(b)
        ap = np.empty_like(a)
        bp[..., perm] = b
        ap[..., perm] = a
        b, a = bp, ap
    return KeySwitchKey(params, b.astype(np.uint32), a.astype(np.uint32), galois)


def keygen(params: BfvParams, rotation_steps=(), seed: Seed = None, relin: bool = True) -> BfvKeySet:
    """Fresh key set; deterministic for a given seed."""
    rng = make_rng(seed, "bfv-keygen", params.name)
    mod = params.context.q
    n = params.n
    s_small = ternary(rng, n)
    s_ntt = _ntt_small(s_small, params)
    sk = SecretKey(params, s_ntt, s_small)

    a = uniform_residues(rng, mod.primes, n)
    e = _ntt_small(centered_binomial(rng, n, ERROR_ETA), params)
    b = neg_raw(add_raw(mul_raw(a, s_ntt, mod), e, mod), mod)
    pk = PublicKey(params, np.stack([b, a]))

    rlk = _keyswitch_key(mul_raw(s_ntt, s_ntt, mod), sk, rng) if relin else None
    galois: dict[int, KeySwitchKey] = {}
    for step in sorted({_norm_step(s, params) for s in rotation_steps}):
        if step == 0:
            continue
        g = galois_element(step, n)
        perm = ntt_automorphism_perm(g, n)
        galois[step] = _keyswitch_key(np.ascontiguousarray(s_ntt[:, perm]), sk, rng, galois=g)
    return BfvKeySet(params, pk, sk, rlk, galois)


# ---------------------------------------------------------------------------
# plaintexts and ciphertexts


class Plaintext:
    """A slot vector encoded as a polynomial mod p, with lazily cached lifts."""

    __slots__ = ("params", "coeffs", "_lift", "_scaled", "_growth")

    def __init__(self, values, params: BfvParams, coeffs: np.ndarray | None = None):
        self.params = params
        if coeffs is None:
            v = values.values if isinstance(values, SlotVector) else np.asarray(values)
            coeffs = batch_encode(v, params.n).astype(np.int64)
        self.coeffs = np.asarray(coeffs, dtype=np.int64)
        self._lift = None
        self._scaled = None
        self._growth = None

    @property
    def lift_ntt(self) -> np.ndarray:
        """NTT over Q of the centered lift (for plaintext multiplication)."""
        if self._lift is None:
            self._lift = _ntt_small(centered(self.coeffs), self.params)
            self._lift.setflags(write=False)
        return self._lift

    @property
    def scaled_ntt(self) -> np.ndarray:
        """NTT over Q of Delta * m (for plaintext addition)."""
        if self._scaled is None:
            ctx = self.params.context
            m = ctx.q.reduce(self.coeffs)
            arr = K.mul_scalar_rows(m, ctx.delta_mod, ctx.q.pidx(len(ctx.q)), ctx.q.qs, ctx.q.mus)
            self._scaled = forward_inplace(arr, ctx.q)
            self._scaled.setflags(write=False)
        return self._scaled

    def slots(self) -> SlotVector:
        return SlotVector(batch_decode(self.coeffs))


class BfvCiphertext:
    """2 or 3 NTT-domain ring elements plus a running noise estimate."""

    __slots__ = ("params", "data", "noise_bits")

    def __init__(self, data: np.ndarray, params: BfvParams, noise_bits: float):
        if data.ndim != 3 or data.shape[0] not in (2, 3):
            raise ParameterError(f"ciphertexts have 2 or 3 components, got shape {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.uint64)
        data.setflags(write=False)
        self.data = data
        self.params = params
        self.noise_bits = float(noise_bits)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def components(self) -> list[RingElement]:
        return [RingElement(c, self.params.context.q, True) for c in self.data]

    @property
    def budget_estimate(self) -> float:
        return noise_model(self.params).budget(self.noise_bits)

    def __repr__(self) -> str:
        return f"BfvCiphertext({self.params.name}, size={self.size}, ~{self.budget_estimate:.0f} bits left)"


_MODELS: dict[BfvParams, NoiseModel] = {}


def noise_model(params: BfvParams) -> NoiseModel:
    if params not in _MODELS:
        _MODELS[params] = NoiseModel(params)
    return _MODELS[params]


def _as_plain(v, params: BfvParams) -> Plaintext:
    return v if isinstance(v, Plaintext) else Plaintext(v, params)


def _check_same(a: BfvCiphertext, b) -> None:
    if a.params != b.params:
        raise ParameterError(f"parameter mismatch: {a.params.name} vs {b.params.name}")


# ---------------------------------------------------------------------------
# encryption


def encrypt(values, pk: PublicKey, rng=None) -> BfvCiphertext:
    """Public-key encryption of a slot vector (or prepared Plaintext)."""
    params = pk.params
    pt = _as_plain(values, params)
    if rng is None or isinstance(rng, int):
        rng = make_rng(rng, "bfv-encrypt")
    mod = params.context.q
    n = params.n
    u = _ntt_small(ternary(rng, n), params)
    e1 = mod.reduce(centered_binomial(rng, n, ERROR_ETA))
    e2 = mod.reduce(centered_binomial(rng, n, ERROR_ETA))
    e12 = np.stack([e1, e2])
    forward_inplace(e12, mod)
    c = mul_raw(pk.data, np.ascontiguousarray(np.broadcast_to(u, pk.data.shape)), mod)
    c = add_raw(c, e12, mod)
    c[0] = add_raw(c[0], pt.scaled_ntt, mod)
    return BfvCiphertext(c, params, noise_model(params).fresh)


def _dot_secret(ct: BfvCiphertext, sk: SecretKey) -> np.ndarray:
    """Coefficient-domain c0 + c1*s (+ c2*s^2)."""
    mod = ct.params.context.q
    x = add_raw(ct.data[0], mul_raw(ct.data[1], sk.ntt, mod), mod)
    if ct.size == 3:
        s2 = mul_raw(sk.ntt, sk.ntt, mod)
        x = add_raw(x, mul_raw(ct.data[2], s2, mod), mod)
    return inverse_inplace(np.array(x, order="C"), mod)


def decrypt(ct: BfvCiphertext, sk: SecretKey, check: bool = True) -> SlotVector:
    """Decrypt to slots; raises DecryptionIntegrityError if the noise has
    reached a quarter of the modulus (no budget left)."""
    if sk is None:
        raise MissingKeyError("decryption needs the secret key")
    _check_same(ct, sk)
    ctx = ct.params.context
    x = _dot_secret(ct, sk)
    msg, dist = K.rounding_fractions(x, ctx.q.qs, ctx.qhat_inv, ctx.qhat_inv_s, ct.params.plain_modulus)
    if check and float(dist.max()) >= 0.25:
        raise DecryptionIntegrityError(f"noise budget exhausted (max rounding distance {dist.max():.3f})")
    return SlotVector(batch_decode(msg))


def noise_budget(ct: BfvCiphertext, sk: SecretKey) -> int:
    """Remaining noise budget in bits, measured exactly with the secret key."""
    ctx = ct.params.context
    x = ctx.q.crt_lift(_dot_secret(ct, sk), centered=False)
    big_q = ctx.big_q
    v = (x * ct.params.plain_modulus) % big_q
    v = np.where(v > big_q // 2, big_q - v, v)
    norm = int(v.max()) if v.size else 0
    return max(0, big_q.bit_length() - 1 - norm.bit_length())


# ---------------------------------------------------------------------------
# linear operations


def he_add(a: BfvCiphertext, b: BfvCiphertext) -> BfvCiphertext:
    _check_same(a, b)
    mod = a.params.context.q
    if a.size < b.size:
        a, b = b, a
    out = np.array(a.data)
    out[: b.size] = add_raw(a.data[: b.size], b.data, mod)
    return BfvCiphertext(out, a.params, _log2quad(a.noise_bits, b.noise_bits))


def he_sub(a: BfvCiphertext, b: BfvCiphertext) -> BfvCiphertext:
    return he_add(a, he_negate(b))


def he_negate(a: BfvCiphertext) -> BfvCiphertext:
    return BfvCiphertext(neg_raw(a.data, a.params.context.q), a.params, a.noise_bits)


def he_plain_add(a: BfvCiphertext, v) -> BfvCiphertext:
    pt = _as_plain(v, a.params)
    _check_same(a, pt)
    mod = a.params.context.q
    out = np.array(a.data)
    out[0] = add_raw(a.data[0], pt.scaled_ntt, mod)
    return BfvCiphertext(out, a.params, _log2sum(a.noise_bits, log2(a.params.plain_modulus) + 1))


def he_plain_mul(a: BfvCiphertext, v) -> BfvCiphertext:
    """Slot-wise product with a plaintext vector, or with an integer broadcast to every slot."""
    mod = a.params.context.q
    if isinstance(v, (int, np.integer)):
        c = int(v) % a.params.plain_modulus
        cc = c if c <= a.params.plain_modulus // 2 else c - a.params.plain_modulus
        data = scalar_mul_raw(a.data, cc, mod)
        growth = log2(abs(cc)) if cc else -np.inf
        return BfvCiphertext(data, a.params, max(0.0, a.noise_bits + growth))
    pt = _as_plain(v, a.params)
    _check_same(a, pt)
    if pt._growth is None:
        pt._growth = noise_model(a.params).plain_mul(0.0, pt.coeffs)
    data = mul_raw(a.data, np.ascontiguousarray(np.broadcast_to(pt.lift_ntt, a.data.shape)), mod)
    return BfvCiphertext(data, a.params, a.noise_bits + pt._growth)


# ---------------------------------------------------------------------------
# key switching


def _ntt_digits(c_coeff: np.ndarray, params: BfvParams) -> np.ndarray:
    mod = params.context.q
    digits = K.decompose_digits(c_coeff, mod.qs)
    return forward_inplace(digits, mod)


def _apply_key(digits: np.ndarray, key: KeySwitchKey, params: BfvParams):
    mod = params.context.q
    return K.keyswitch_mac(digits, key.kb, key.ka, mod.qs, mod.mus)


def relinearize(ct: BfvCiphertext, relin_key: KeySwitchKey) -> BfvCiphertext:
    if ct.size == 2:
        return ct
    if relin_key is None:
        raise MissingKeyError("relinearization key missing")
    params = ct.params
    mod = params.context.q
    c2 = inverse_inplace(np.array(ct.data[2], order="C"), mod)
    kb, ka = _apply_key(_ntt_digits(c2, params), relin_key, params)
    out = np.stack([add_raw(ct.data[0], kb, mod), add_raw(ct.data[1], ka, mod)])
    return BfvCiphertext(out, params, _log2sum(ct.noise_bits, noise_model(params).keyswitch))


def _rotate_with_digits(ct: BfvCiphertext, digits: np.ndarray, key: KeySwitchKey) -> BfvCiphertext:
    params = ct.params
    mod = params.context.q
    kb, ka = _apply_key(digits, key, params)
    acc0 = add_raw(ct.data[0], kb, mod)
    perm = ntt_automorphism_perm(key.galois, params.n)
    out = np.stack([np.take(acc0, perm, axis=1), np.take(ka, perm, axis=1)])
    return BfvCiphertext(out, params, _log2sum(ct.noise_bits, noise_model(params).keyswitch))


def he_rotate(a: BfvCiphertext, step: int, keys: EvaluationKeys) -> BfvCiphertext:
    """Rotate both slot rows left by ``step`` (negative steps rotate right)."""
    if _norm_step(step, a.params) == 0:
        return a
    return he_rotate_many(a, [step], keys)[0]


def he_rotate_many(a: BfvCiphertext, steps, keys: EvaluationKeys) -> list[BfvCiphertext]:
    """Hoisted rotations: one digit decomposition shared by every step."""
    if a.size != 2:
        raise ParameterError("rotate a relinearized (size-2) ciphertext")
    steps = list(steps)
    ks = [None if _norm_step(s, a.params) == 0 else keys.galois_key(s) for s in steps]
    if all(k is None for k in ks):
        return [a for _ in steps]
    mod = a.params.context.q
    c1 = inverse_inplace(np.array(a.data[1], order="C"), mod)
    digits = _ntt_digits(c1, a.params)
    return [a if key is None else _rotate_with_digits(a, digits, key) for key in ks]


# ---------------------------------------------------------------------------
# multiplication


def _tensor(a: BfvCiphertext, b: BfvCiphertext) -> BfvCiphertext:
    params = a.params
    ctx = params.context
    qm, bm = ctx.q, ctx.b
    kq = len(qm)

    def to_b(ntt_q: np.ndarray) -> np.ndarray:
        coeff = inverse_inplace(np.array(ntt_q, order="C"), qm)
        out = np.stack([K.base_convert(c, qm.qs, qm.mus, *ctx.q_to_b[:2], bm.qs, bm.mus, *ctx.q_to_b[2:]) for c in coeff])
        return forward_inplace(out, bm)

    a_b = to_b(a.data)
    b_b = a_b if b is a else to_b(b.data)

    def tensor(x, y, mod):
        d0 = mul_raw(x[0], y[0], mod)
        d1 = add_raw(mul_raw(x[0], y[1], mod), mul_raw(x[1], y[0], mod), mod)
        d2 = mul_raw(x[1], y[1], mod)
        return inverse_inplace(np.stack([d0, d1, d2]), mod)

    dq = tensor(a.data, b.data, qm)
    db = tensor(a_b, b_b, bm)

    pq_idx = qm.pidx(kq)
    pb_idx = bm.pidx(len(bm))
    out = np.empty((3, kq, params.n), dtype=np.uint64)
    for j in range(3):
        w_q = K.mul_scalar_rows(dq[j], ctx.p_mod_q, pq_idx, qm.qs, qm.mus)
        r_b = K.base_convert(w_q, qm.qs, qm.mus, *ctx.q_to_b[:2], bm.qs, bm.mus, *ctx.q_to_b[2:])
        w_b = K.mul_scalar_rows(db[j], ctx.p_mod_b, pb_idx, bm.qs, bm.mus)
        z_b = K.mul_scalar_rows(K.sub_rows(w_b, r_b, pb_idx, bm.qs), ctx.q_inv_mod_b, pb_idx, bm.qs, bm.mus)
        out[j] = K.base_convert(z_b, bm.qs, bm.mus, *ctx.b_to_q[:2], qm.qs, qm.mus, *ctx.b_to_q[2:])
    forward_inplace(out, qm)
    model = noise_model(params)
    noise = max(a.noise_bits, b.noise_bits) + model.mult
    return BfvCiphertext(out, params, noise)


def he_mul(a: BfvCiphertext, b: BfvCiphertext) -> BfvCiphertext:
    """Tensor product without relinearization (size-3 result)."""
    _check_same(a, b)
    if a.size != 2 or b.size != 2:
        raise ParameterError("multiply size-2 ciphertexts")
    return _tensor(a, b)


def he_mul_relin(a: BfvCiphertext, b: BfvCiphertext, relin_key: KeySwitchKey) -> BfvCiphertext:
    return relinearize(he_mul(a, b), relin_key)


def he_square(a: BfvCiphertext, relin_key: KeySwitchKey) -> BfvCiphertext:
    if a.size != 2:
        raise ParameterError("square a size-2 ciphertext")
    return relinearize(_tensor(a, a), relin_key)


def require_budget(ct: BfvCiphertext, where: str) -> BfvCiphertext:
    """Raise NoiseBudgetExhausted if the running estimate says no headroom is left."""
    if ct.budget_estimate <= 0:
        raise NoiseBudgetExhausted(f"noise budget exhausted after {where}", layer=where)
    return ct
