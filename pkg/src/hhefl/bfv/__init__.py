"""BFV homomorphic encryption over R_q with p = 65537 slot batching."""

from hhefl.bfv.params import DEFAULT_PRESET, PRESETS, BfvParams, depth_budget_bits
from hhefl.bfv.scheme import (
    BfvCiphertext,
    BfvKeySet,
    EvaluationKeys,
    KeySwitchKey,
    Plaintext,
    PublicKey,
    SecretKey,
    decrypt,
    encrypt,
    he_add,
    he_mul,
    he_mul_relin,
    he_negate,
    he_plain_add,
    he_plain_mul,
    he_rotate,
    he_rotate_many,
    he_square,
    he_sub,
    keygen,
    noise_budget,
    relinearize,
)

__all__ = [
    "DEFAULT_PRESET",
    "PRESETS",
    "BfvCiphertext",
    "BfvKeySet",
    "BfvParams",
    "EvaluationKeys",
    "KeySwitchKey",
    "Plaintext",
    "PublicKey",
    "SecretKey",
    "decrypt",
    "depth_budget_bits",
    "encrypt",
    "he_add",
    "he_mul",
    "he_mul_relin",
    "he_negate",
    "he_plain_add",
    "he_plain_mul",
    "he_rotate",
    "he_rotate_many",
    "he_square",
    "he_sub",
    "keygen",
    "noise_budget",
    "relinearize",
]
