"""Pure-numpy kernels for GF(2^61 - 1) vector arithmetic and quantized matrix products.

Mirror of the compiled extension in ``_corefast.pyx``; every function here must
produce bit-identical results to its compiled twin. Multiplication uses 32-bit
limb splitting so all intermediates fit in uint64; the Mersenne structure
(2^61 = 1 mod p) makes reduction a pair of shift-folds.
"""

from __future__ import annotations

import numpy as np

P = (1 << 61) - 1
_MASK61 = np.uint64(P)
_MASK32 = np.uint64(0xFFFFFFFF)
_MASK29 = np.uint64((1 << 29) - 1)

_SM_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SM_K1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_K2 = np.uint64(0x94D049BB133111EB)

BACKEND = "fallback"


def _as_u64(a):
    arr = np.asarray(a, dtype=np.uint64)
    return arr


def _fold61(s):
    """Reduce values < 2^63 to canonical [0, p)."""
    s = (s >> np.uint64(61)) + (s & _MASK61)
    s = (s >> np.uint64(61)) + (s & _MASK61)
    return np.where(s >= np.uint64(P), s - np.uint64(P), s)


def addmod(a, b):
    a, b = _as_u64(a), _as_u64(b)
    s = a + b
    return np.where(s >= np.uint64(P), s - np.uint64(P), s)


def submod(a, b):
    a, b = _as_u64(a), _as_u64(b)
    s = a + (np.uint64(P) - b)
    return np.where(s >= np.uint64(P), s - np.uint64(P), s)


def negmod(a):
    a = _as_u64(a)
    return np.where(a == np.uint64(0), a, np.uint64(P) - a)


def mulmod(a, b):
    a, b = np.broadcast_arrays(_as_u64(a), _as_u64(b))
    a1 = a >> np.uint64(32)
    a0 = a & _MASK32
    b1 = b >> np.uint64(32)
    b0 = b & _MASK32
    hi = a1 * b1                      # < 2^58
    mid = a1 * b0 + a0 * b1           # < 2^62
    lo = a0 * b0                      # < 2^64, exact in uint64
    m1 = mid >> np.uint64(29)
    m0 = mid & _MASK29
    t1 = lo >> np.uint64(61)
    t0 = lo & _MASK61
    s = (hi << np.uint64(3)) + m1 + (m0 << np.uint64(32)) + t1 + t0   # < 2^63
    return _fold61(s)


def sum_mod(a):
    """Exact sum of a uint64 field array mod p."""
    a = np.ascontiguousarray(_as_u64(a)).ravel()
    total = 0
    for off in range(0, a.size, 1 << 24):
        chunk = a[off:off + (1 << 24)]
        lo = int(np.sum(chunk & _MASK32, dtype=np.uint64))
        hi = int(np.sum(chunk >> np.uint64(32), dtype=np.uint64))
        total = (total + (hi << 32) + lo) % P
    return total


def dot_mod(a, b):
    return sum_mod(mulmod(a, b))


def matvec_mod(mat, vec):
    """(rows, cols) @ (cols,) over the field."""
    mat, vec = _as_u64(mat), _as_u64(vec)
    t = mulmod(mat, vec[None, :])
    lo = np.sum(t & _MASK32, axis=1, dtype=np.uint64)       # < cols * 2^32
    hi = np.sum(t >> np.uint64(32), axis=1, dtype=np.uint64)
    return addmod(mulmod(_fold61(hi), np.uint64((1 << 32) % P)), _fold61(lo))


def powers_mod(s, count):
    """[1, s, s^2, ...] of length count."""
    out = np.empty(count, dtype=np.uint64)
    if count == 0:
        return out
    out[0] = 1
    filled = 1
    s = int(s) % P
    cur = s
    while filled < count:
        m = min(filled, count - filled)
        out[filled:filled + m] = mulmod(out[:m], np.uint64(cur))
        filled += m
        cur = (cur * cur) % P
    return out


def eval_poly(vals, s):
    """sum vals[j] * s^j mod p."""
    vals = _as_u64(vals)
    return dot_mod(vals, powers_mod(s, vals.size))


def splitmix_raw(seed, start, count):
    """Counter-mode SplitMix64 stream: outputs for indices start+1 .. start+count."""
    idx = np.arange(int(start) + 1, int(start) + int(count) + 1, dtype=np.uint64)
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _SM_GOLDEN
    z ^= z >> np.uint64(30)
    z *= _SM_K1
    z ^= z >> np.uint64(27)
    z *= _SM_K2
    z ^= z >> np.uint64(31)
    return z


def uniform_mod(seed, start, count):
    """Uniform field elements from the SplitMix64 stream (61-bit mask, p folds to 0)."""
    v = splitmix_raw(seed, start, count) & _MASK61
    return np.where(v == np.uint64(P), np.uint64(0), v)


def to_signed(a):
    """Field elements -> signed int64 under the centered embedding."""
    x = _as_u64(a).astype(np.int64)
    return np.where(x > P // 2, x - P, x)


def from_signed(a):
    """Signed int64 (|a| < p/2) -> canonical field elements."""
    x = np.asarray(a, dtype=np.int64)
    return np.where(x < 0, x + P, x).astype(np.uint64)


def rescale_matmul(a, b, frac_bits):
    """Integer matmul a @ b followed by a round-half-up shift by frac_bits.

    Returns (q, r) with a @ b + 2^(frac_bits-1) == q * 2^frac_bits + r,
    0 <= r < 2^frac_bits. One operand must be small (|x| < 2^18) so the
    20-bit limb split of the other stays exact in int64.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    f = int(frac_bits)
    if not 1 <= f <= 20:
        raise ValueError("frac_bits out of supported range")
    amax = int(np.max(np.abs(a))) if a.size else 0
    bmax = int(np.max(np.abs(b))) if b.size else 0
    lim_small, lim_big = 1 << 18, 1 << 41
    if amax < lim_small and bmax < lim_big:
        bh = b >> 20
        bl = b & ((1 << 20) - 1)
        ph = a @ bh
        pl = a @ bl
    elif bmax < lim_small and amax < lim_big:
        ah = a >> 20
        al = a & ((1 << 20) - 1)
        ph = ah @ b
        pl = al @ b
    else:
        raise OverflowError("operands too large for exact rescale_matmul")
    base = pl + (1 << (f - 1))
    q = (ph << (20 - f)) + (base >> f)
    r = base & ((1 << f) - 1)
    return q, r
