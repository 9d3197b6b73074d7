"""Compiled residue kernels.

All arrays are ``uint64`` with residues strictly below their prime, and every
prime is below 2**31 so a product of two residues fits in 62 bits.  Rows of a
2-D array are independent polynomials; ``pidx[r]`` selects the prime (and
twiddle-table row) used for row ``r``.

Inner loops run over contiguous row slices and reduce with selects rather
than branches, which lets LLVM vectorize the 64-bit multiplies.
"""

import numpy as np
from numba import njit

U32 = np.uint64(32)
ONE = np.uint64(1)
ZERO = np.uint64(0)


@njit(inline="always")
def _csub(x, q):
    return x - q if x >= q else x


@njit(inline="always")
def _mul_shoup(x, w, ws, q):
    # w * x mod q with ws = floor(w * 2**32 / q); x < 2**32, w < q < 2**31
    hi = (x * ws) >> U32
    return _csub(x * w - hi * q, q)


@njit(inline="always")
def _shifts(q):
    # Barrett shifts (b - 1, b + 1) for a b-bit modulus
    b = np.uint64(0)
    x = q
    while x:
        b += ONE
        x >>= ONE
    return b - ONE, b + ONE


@njit(inline="always")
def _mul_barrett(a, b, q, mu, s1, s2):
    # a * b mod q with mu = floor(4**bits / q); quotient estimate is short by <= 2
    x = a * b
    hi = ((x >> s1) * mu) >> s2
    return _csub(_csub(x - hi * q, q), q)


@njit(cache=True)
def ntt_forward_rows(a, pidx, tw, tws, qs):
    """In-place negacyclic NTT, natural order in, bit-reversed order out."""
    rows, n = a.shape
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        row = a[r]
        twr = tw[p]
        twsr = tws[p]
        m = 1
        t = n >> 1
        while m < n:
            for i in range(m):
                w = twr[m + i]
                ws = twsr[m + i]
                lo = row[2 * i * t : 2 * i * t + t]
                hi = row[2 * i * t + t : 2 * i * t + 2 * t]
                for j in range(t):
                    u = lo[j]
                    v = _mul_shoup(hi[j], w, ws, q)
                    lo[j] = _csub(u + v, q)
                    hi[j] = _csub(u + q - v, q)
            m <<= 1
            t >>= 1


@njit(cache=True)
def ntt_inverse_rows(a, pidx, itw, itws, qs, ninv, ninvs):
    """In-place inverse of :func:`ntt_forward_rows` (includes the 1/N scale)."""
    rows, n = a.shape
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        row = a[r]
        twr = itw[p]
        twsr = itws[p]
        t = 1
        m = n >> 1
        while m >= 1:
            for i in range(m):
                w = twr[m + i]
                ws = twsr[m + i]
                lo = row[2 * i * t : 2 * i * t + t]
                hi = row[2 * i * t + t : 2 * i * t + 2 * t]
                for j in range(t):
                    u = lo[j]
                    v = hi[j]
                    lo[j] = _csub(u + v, q)
                    hi[j] = _mul_shoup(u + q - v, w, ws, q)
            t <<= 1
            m >>= 1
        ni = ninv[p]
        nis = ninvs[p]
        for j in range(n):
            row[j] = _mul_shoup(row[j], ni, nis, q)


@njit(cache=True)
def mul_rows(a, b, pidx, qs, mus):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        mu = mus[p]
        s1, s2 = _shifts(q)
        ar = a[r]
        br = b[r]
        orow = out[r]
        for j in range(n):
            orow[j] = _mul_barrett(ar[j], br[j], q, mu, s1, s2)
    return out


@njit(cache=True)
def mul_scalar_rows(a, s, pidx, qs, mus):
    """Multiply row r by the residue s[pidx[r]] (< q)."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        c = s[p]
        cs = (c << U32) // q
        ar = a[r]
        orow = out[r]
        for j in range(n):
            orow[j] = _mul_shoup(ar[j], c, cs, q)
    return out


@njit(cache=True)
def add_rows(a, b, pidx, qs):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        q = qs[pidx[r]]
        ar = a[r]
        br = b[r]
        orow = out[r]
        for j in range(n):
            orow[j] = _csub(ar[j] + br[j], q)
    return out


@njit(cache=True)
def sub_rows(a, b, pidx, qs):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        q = qs[pidx[r]]
        ar = a[r]
        br = b[r]
        orow = out[r]
        for j in range(n):
            orow[j] = _csub(ar[j] + q - br[j], q)
    return out


@njit(cache=True)
def neg_rows(a, pidx, qs):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        q = qs[pidx[r]]
        ar = a[r]
        orow = out[r]
        for j in range(n):
            orow[j] = _csub(q - ar[j], q)
    return out


@njit(cache=True)
def fma_rows(acc, a, b, pidx, qs, mus):
    """acc += a * b (mod q), in place."""
    rows, n = a.shape
    for r in range(rows):
        p = pidx[r]
        q = qs[p]
        mu = mus[p]
        s1, s2 = _shifts(q)
        ar = a[r]
        br = b[r]
        cr = acc[r]
        for j in range(n):
            cr[j] = _csub(cr[j] + _mul_barrett(ar[j], br[j], q, mu, s1, s2), q)


@njit(cache=True)
def decompose_digits(c, qs):
    """Split a coefficient-domain RNS polynomial into its per-prime digits.

    Digit d is the centered residue of c modulo qs[d], re-reduced modulo every
    prime of the chain.  Output shape is (k, k, n): (digit, prime, coeff).
    """
    k, n = c.shape
    out = np.empty((k, k, n), dtype=np.uint64)
    for d in range(k):
        qd = qs[d]
        half = qd >> ONE
        src = c[d]
        for p in range(k):
            qp = qs[p]
            dst = out[d, p]
            if half < qp:
                # |digit| < q_p: a negative digit x - q_d becomes x + q_p - q_d
                for j in range(n):
                    x = src[j]
                    dst[j] = x if x <= half else x + qp - qd
            else:
                for j in range(n):
                    x = src[j]
                    if x > half:
                        m = (qd - x) % qp
                        dst[j] = ZERO if m == ZERO else qp - m
                    else:
                        dst[j] = x % qp
    return out


@njit(cache=True)
def keyswitch_mac(digits, kb, ka, qs, mus):
    """Inner products of NTT-domain digits with a key-switching key.

    digits: (k, k, n) uint64; kb, ka: (k, k, n) uint32 key rows.
    Returns (sum_d digits[d] * kb[d], sum_d digits[d] * ka[d]) as (k, n) arrays.
    """
    kd, k, n = digits.shape
    out_b = np.zeros((k, n), dtype=np.uint64)
    out_a = np.zeros((k, n), dtype=np.uint64)
    for p in range(k):
        q = qs[p]
        mu = mus[p]
        s1, s2 = _shifts(q)
        ob = out_b[p]
        oa = out_a[p]
        for d in range(kd):
            dr = digits[d, p]
            br = kb[d, p]
            ar = ka[d, p]
            for j in range(n):
                x = dr[j]
                ob[j] = _csub(ob[j] + _mul_barrett(x, np.uint64(br[j]), q, mu, s1, s2), q)
                oa[j] = _csub(oa[j] + _mul_barrett(x, np.uint64(ar[j]), q, mu, s1, s2), q)
    return out_b, out_a


@njit(cache=True)
def base_convert(x, src_q, src_mus, qhat_inv, qhat_inv_s, dst_q, dst_mus, qhat_mod_dst, big_mod_dst):
    """Exact-with-high-probability centered base conversion.

    x: (k, n) residues modulo src_q.  The centered integer X in
    (-Q/2, Q/2] is reconstructed as sum_i y_i * Qhat_i - v * Q with
    y_i = x_i * Qhat_i^{-1} mod q_i and v = round(sum_i y_i / q_i); the
    result is X modulo every destination prime, shape (m, n).
    """
    k, n = x.shape
    m = dst_q.shape[0]
    y = np.empty((k, n), dtype=np.uint64)
    frac = np.zeros(n, dtype=np.float64)
    for i in range(k):
        qi = src_q[i]
        inv_q = 1.0 / float(qi)
        w = qhat_inv[i]
        ws = qhat_inv_s[i]
        xr = x[i]
        yr = y[i]
        for j in range(n):
            yi = _mul_shoup(xr[j], w, ws, qi)
            yr[j] = yi
            frac[j] += float(yi) * inv_q
    v = np.empty(n, dtype=np.uint64)
    for j in range(n):
        v[j] = np.uint64(np.floor(frac[j] + 0.5))
    out = np.empty((m, n), dtype=np.uint64)
    for t in range(m):
        qt = dst_q[t]
        cm = big_mod_dst[t]
        cms = (cm << U32) // qt
        orow = out[t]
        # start from q_t - v*Q mod q_t so the running sum never underflows
        for j in range(n):
            orow[j] = qt - _mul_shoup(v[j], cm, cms, qt)
        for i in range(k):
            w = qhat_mod_dst[i, t]
            ws = (w << U32) // qt
            yr = y[i]
            for j in range(n):
                orow[j] = _csub(orow[j] + _mul_shoup(yr[j], w, ws, qt), qt)
        for j in range(n):
            orow[j] = _csub(orow[j], qt)
    return out


@njit(cache=True)
def rounding_fractions(x, qs, qhat_inv, qhat_inv_s, t_mod):
    """Decryption helper: per coefficient, compute round(t * X / Q) mod t and
    the centered distance |t*X/Q - round(t*X/Q)| in [0, 0.5] for X given by
    its residues x (k, n).  Uses sum_i t*y_i/q_i with y_i = x_i*Qhat_i^-1 mod q_i.
    """
    k, n = x.shape
    msg = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for j in range(n):
        ip = 0
        fr = 0.0
        for i in range(k):
            yi = _mul_shoup(x[i, j], qhat_inv[i], qhat_inv_s[i], qs[i])
            num = yi * np.uint64(t_mod)
            qi = qs[i]
            ip += np.int64(num // qi)
            fr += float(num % qi) / float(qi)
        r = np.floor(fr + 0.5)
        dist[j] = abs(fr - r)
        msg[j] = (ip + np.int64(r)) % t_mod
    return msg, dist
