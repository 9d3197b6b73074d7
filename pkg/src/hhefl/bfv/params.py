"""BFV parameter presets and the precomputed RNS context behind them."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import ceil, log2, prod

import numpy as np

from hhefl.errors import ParameterError
from hhefl.field import P
from hhefl.ring.modulus import CoefficientModulus, ntt_primes

# 128-bit classical security: largest total coefficient modulus per degree
SECURITY_BOUND_BITS = {4096: 109, 8192: 218, 16384: 438}

# name -> (N, prime bit sizes); every prime is 1 mod 2**15
PRESETS = {
    "bfv-4096": (4096, (27,) * 4),
    "bfv-8192": (8192, (31,) * 7),
    "bfv-16384": (16384, (31,) * 14),
}
DEFAULT_PRESET = "bfv-16384"

_TOY = re.compile(r"toy-(\d+)x(\d+)$")


@dataclass(frozen=True)
class BfvParams:
    """Ring degree, plaintext modulus and coefficient-modulus chain.

    Presets named ``toy-<N>x<k>`` use k 31-bit primes at degree N with no
    security claim; they exist so property tests and timing sweeps stay fast.
    """

    name: str
    n: int
    prime_bits: tuple[int, ...]
    plain_modulus: int = P

    @classmethod
    def preset(cls, name: str) -> "BfvParams":
        if name in PRESETS:
            n, bits = PRESETS[name]
            return cls(name, n, bits)
        m = _TOY.match(name)
        if m:
            n, k = int(m.group(1)), int(m.group(2))
            return cls(name, n, (31,) * k)
        raise ParameterError(f"unsupported BFV preset {name!r}; choose one of {sorted(PRESETS)} or toy-<N>x<k>")

    @classmethod
    def toy(cls, n: int, n_primes: int = 14) -> "BfvParams":
        return cls.preset(f"toy-{n}x{n_primes}")

    def __post_init__(self):
        if self.n < 16 or self.n & (self.n - 1):
            raise ParameterError(f"ring degree {self.n} is not a power of two >= 16")
        if (self.plain_modulus - 1) % (2 * self.n):
            raise ParameterError(f"plaintext modulus {self.plain_modulus} is not 1 mod 2N")
        if self.n > 16384:
            raise ParameterError("ring degrees above 16384 are not supported")

    @property
    def insecure(self) -> bool:
        return self.name.startswith("toy-")

    @property
    def slots(self) -> int:
        return self.n

    @property
    def row_size(self) -> int:
        return self.n // 2

    @cached_property
    def context(self) -> "BfvContext":
        return _context(self)


def _grouped_primes(bit_sizes: tuple[int, ...]) -> list[int]:
    out: list[int] = []
    for bits in sorted(set(bit_sizes), reverse=True):
        out += ntt_primes(bits, bit_sizes.count(bits))
    return out


class BfvContext:
    """Moduli and constants derived from :class:`BfvParams` (built once per preset)."""

    def __init__(self, params: BfvParams):
        self.params = params
        n, p = params.n, params.plain_modulus
        q_primes = _grouped_primes(params.prime_bits)
        self.q = CoefficientModulus.build(q_primes, n)
        big_q = self.q.product
        bound = SECURITY_BOUND_BITS.get(n)
        if not params.insecure and (bound is None or big_q.bit_length() > bound):
            raise ParameterError(f"{big_q.bit_length()}-bit modulus exceeds the 128-bit bound for N={n}")
        self.big_q = big_q
        self.delta = big_q // p
        self.delta_mod = np.array([self.delta % q for q in q_primes], dtype=np.uint64)
        self.p_mod_q = np.array([p % q for q in q_primes], dtype=np.uint64)

        # auxiliary basis for exact tensoring: B > 2 * p * N * Q with slack
        need_bits = big_q.bit_length() + int(log2(n)) + p.bit_length() + 4
        used = set(q_primes)
        aux: list[int] = []
        for cand in ntt_primes(31, 64):
            if sum(q.bit_length() - 1 for q in aux) >= need_bits:
                break
            if cand not in used:
                aux.append(cand)
        self.b = CoefficientModulus.build(aux, n)
        big_b = self.b.product
        self.big_b = big_b
        self.q_to_b = _conversion(q_primes, aux)
        self.b_to_q = _conversion(aux, q_primes)
        self.q_inv_mod_b = np.array([pow(big_q % b, -1, b) for b in aux], dtype=np.uint64)
        self.p_mod_b = np.array([p % b for b in aux], dtype=np.uint64)
        # decryption: Qhat_i^-1 mod q_i with Shoup companions
        self.qhat_inv = self.q_to_b[0]
        self.qhat_inv_s = self.q_to_b[1]

    @property
    def q_bits(self) -> int:
        return self.big_q.bit_length()


def _conversion(src: list[int], dst: list[int]):
    big = prod(src)
    hats = [big // q for q in src]
    hat_inv = np.array([pow(h % q, -1, q) for h, q in zip(hats, src)], dtype=np.uint64)
    hat_inv_s = np.array([(int(v) << 32) // q for v, q in zip(hat_inv, src)], dtype=np.uint64)
    hat_mod = np.array([[h % d for d in dst] for h in hats], dtype=np.uint64)
    big_mod = np.array([big % d for d in dst], dtype=np.uint64)
    return hat_inv, hat_inv_s, hat_mod, big_mod


@lru_cache(maxsize=None)
def _context(params: BfvParams) -> BfvContext:
    return BfvContext(params)


def depth_budget_bits(params: BfvParams) -> int:
    """Initial headroom in bits: log2(Q) - log2(p) - 1."""
    ctx = params.context
    return ctx.q_bits - params.plain_modulus.bit_length() - 1


def toy_for(t: int) -> int:
    """Smallest toy degree whose rows hold the replicated 2t-element state."""
    return max(1024, 1 << ceil(log2(8 * t)))
