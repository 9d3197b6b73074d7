"""Arithmetic in the prime field F_p with p = 65537."""

from __future__ import annotations

import numpy as np

P = 65537


def field_op(a: int, b: int, kind: str, p: int = P) -> int:
    """Apply ``kind`` in {add, sub, mul, pow} to reduced operands."""
    if kind == "add":
        return (a + b) % p
    if kind == "sub":
        return (a - b) % p
    if kind == "mul":
        return (a * b) % p
    if kind == "pow":
        result, base, e = 1, a % p, b
        while e:
            if e & 1:
                result = result * base % p
            base = base * base % p
            e >>= 1
        return result
    raise ValueError(f"unknown field operation {kind!r}")


def reduce(values, p: int = P) -> np.ndarray:
    return np.mod(np.asarray(values, dtype=np.int64), p)


def add(a, b, p: int = P) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)) % p


def sub(a, b, p: int = P) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64)) % p


def mul(a, b, p: int = P) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)) % p


def neg(a, p: int = P) -> np.ndarray:
    return (-np.asarray(a, dtype=np.int64)) % p


def matvec(m: np.ndarray, v: np.ndarray, p: int = P) -> np.ndarray:
    """Matrix-vector product over F_p; entries < 2**17 so int64 rows never overflow for t < 2**29."""
    m = np.asarray(m, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    return (m % p) @ (v % p) % p


def centered(values, p: int = P) -> np.ndarray:
    """Lift residues to (-p/2, p/2]."""
    v = np.asarray(values, dtype=np.int64) % p
    return np.where(v > p // 2, v - p, v)
