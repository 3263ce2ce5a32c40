# Compiled kernels for GF(2^61 - 1) and quantized matrix products.
# Must stay bit-identical to the numpy fallback in fallback.py.

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cdef extern from *:
    ctypedef unsigned int uint128_t "unsigned __int128"
    ctypedef int int128_t "__int128"

cdef uint64_t PMOD = 2305843009213693951ULL  # 2^61 - 1

P = 2305843009213693951
BACKEND = "compiled"

cdef uint64_t SM_GOLDEN = 0x9E3779B97F4A7C15u
cdef uint64_t SM_K1 = 0xBF58476D1CE4E5B9u
cdef uint64_t SM_K2 = 0x94D049BB133111EBu


cdef inline uint64_t _mulmod1(uint64_t a, uint64_t b) nogil:
    cdef uint128_t t = <uint128_t>a * <uint128_t>b
    cdef uint64_t lo = <uint64_t>(t & <uint128_t>PMOD)
    cdef uint64_t hi = <uint64_t>(t >> 61)
    cdef uint64_t s = lo + hi
    # hi < 2^61 + ... one more fold covers the carry
    s = (s >> 61) + (s & <uint64_t>PMOD)
    if s >= <uint64_t>PMOD:
        s -= <uint64_t>PMOD
    return s


cdef inline uint64_t _addmod1(uint64_t a, uint64_t b) nogil:
    cdef uint64_t s = a + b
    if s >= <uint64_t>PMOD:
        s -= <uint64_t>PMOD
    return s


cdef inline uint64_t _submod1(uint64_t a, uint64_t b) nogil:
    cdef uint64_t s = a + (<uint64_t>PMOD - b)
    if s >= <uint64_t>PMOD:
        s -= <uint64_t>PMOD
    return s


cdef inline uint64_t _mix1(uint64_t z) nogil:
    z ^= z >> 30
    z *= SM_K1
    z ^= z >> 27
    z *= SM_K2
    z ^= z >> 31
    return z


def _prep(a):
    arr = np.ascontiguousarray(a, dtype=np.uint64)
    return arr, arr.reshape(-1)


def addmod(a, b):
    arr, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t s
    if np.isscalar(b) or getattr(b, "ndim", 1) == 0:
        s = <uint64_t>int(b)
        for i in range(n):
            ov[i] = _addmod1(av[i], s)
    else:
        barr = np.ascontiguousarray(np.broadcast_to(b, arr.shape), dtype=np.uint64).reshape(-1)
        _add_arr(av, barr, ov)
    return out.reshape(arr.shape)


cdef void _add_arr(const uint64_t[::1] a, const uint64_t[::1] b, uint64_t[::1] o) nogil:
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        o[i] = _addmod1(a[i], b[i])


def submod(a, b):
    arr, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t s
    if np.isscalar(b) or getattr(b, "ndim", 1) == 0:
        s = <uint64_t>int(b)
        for i in range(n):
            ov[i] = _submod1(av[i], s)
    else:
        barr = np.ascontiguousarray(np.broadcast_to(b, arr.shape), dtype=np.uint64).reshape(-1)
        _sub_arr(av, barr, ov)
    return out.reshape(arr.shape)


cdef void _sub_arr(const uint64_t[::1] a, const uint64_t[::1] b, uint64_t[::1] o) nogil:
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        o[i] = _submod1(a[i], b[i])


def negmod(a):
    arr, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    for i in range(n):
        ov[i] = 0 if av[i] == 0 else <uint64_t>PMOD - av[i]
    return out.reshape(arr.shape)


def mulmod(a, b):
    arr, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t s
    if np.isscalar(b) or getattr(b, "ndim", 1) == 0:
        s = <uint64_t>int(b)
        for i in range(n):
            ov[i] = _mulmod1(av[i], s)
    else:
        barr = np.ascontiguousarray(np.broadcast_to(b, arr.shape), dtype=np.uint64).reshape(-1)
        _mul_arr(av, barr, ov)
    return out.reshape(arr.shape)


cdef void _mul_arr(const uint64_t[::1] a, const uint64_t[::1] b, uint64_t[::1] o) nogil:
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        o[i] = _mulmod1(a[i], b[i])


def sum_mod(a):
    _, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    cdef uint128_t acc = 0
    cdef uint64_t res
    for i in range(n):
        acc += av[i]
    res = <uint64_t>(acc % <uint128_t>PMOD)
    return int(res)


def dot_mod(a, b):
    _, fa = _prep(a)
    _, fb = _prep(b)
    cdef const uint64_t[::1] av = fa
    cdef const uint64_t[::1] bv = fb
    cdef Py_ssize_t n = av.shape[0], i
    cdef uint128_t acc = 0
    cdef uint64_t res
    for i in range(n):
        acc += <uint128_t>_mulmod1(av[i], bv[i])
    res = <uint64_t>(acc % <uint128_t>PMOD)
    return int(res)


def matvec_mod(mat, vec):
    m = np.ascontiguousarray(mat, dtype=np.uint64)
    _, fv = _prep(vec)
    cdef const uint64_t[:, ::1] mv = m
    cdef const uint64_t[::1] vv = fv
    cdef Py_ssize_t rows = mv.shape[0], cols = mv.shape[1], i, j
    out = np.empty(rows, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint128_t acc
    with nogil:
        for i in range(rows):
            acc = 0
            for j in range(cols):
                acc += <uint128_t>_mulmod1(mv[i, j], vv[j])
            ov[i] = <uint64_t>(acc % <uint128_t>PMOD)
    return out


def powers_mod(s, count):
    cdef Py_ssize_t n = count, i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t x = <uint64_t>(int(s) % PMOD)
    if n == 0:
        return out
    ov[0] = 1
    for i in range(1, n):
        ov[i] = _mulmod1(ov[i - 1], x)
    return out


def eval_poly(vals, s):
    _, fv = _prep(vals)
    cdef const uint64_t[::1] av = fv
    cdef Py_ssize_t n = av.shape[0], i
    cdef uint64_t acc = 0
    cdef uint64_t x = <uint64_t>(int(s) % PMOD)
    for i in range(n - 1, -1, -1):
        acc = _addmod1(_mulmod1(acc, x), av[i])
    return int(acc)


def splitmix_raw(seed, start, count):
    cdef Py_ssize_t n = count, i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t sd = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t st = <uint64_t>(int(start) & 0xFFFFFFFFFFFFFFFF)
    for i in range(n):
        ov[i] = _mix1(sd + (st + <uint64_t>i + 1) * SM_GOLDEN)
    return out


def uniform_mod(seed, start, count):
    cdef Py_ssize_t n = count, i
    out = splitmix_raw(seed, start, count)
    cdef uint64_t[::1] ov = out
    cdef uint64_t v
    for i in range(n):
        v = ov[i] & <uint64_t>PMOD
        ov[i] = 0 if v == <uint64_t>PMOD else v
    return out


def to_signed(a):
    arr, flat = _prep(a)
    cdef const uint64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] ov = out
    for i in range(n):
        if av[i] > <uint64_t>(PMOD // 2):
            ov[i] = <int64_t>av[i] - <int64_t>PMOD
        else:
            ov[i] = <int64_t>av[i]
    return out.reshape(arr.shape)


def from_signed(a):
    arr = np.ascontiguousarray(a, dtype=np.int64)
    flat = arr.reshape(-1)
    cdef const int64_t[::1] av = flat
    cdef Py_ssize_t n = av.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    for i in range(n):
        if av[i] < 0:
            ov[i] = <uint64_t>(av[i] + PMOD)
        else:
            ov[i] = <uint64_t>av[i]
    return out.reshape(arr.shape)


def rescale_matmul(a, b, frac_bits):
    """a @ b with round-half-up shift by frac_bits; returns (quotient, remainder)."""
    am = np.ascontiguousarray(a, dtype=np.int64)
    bm = np.ascontiguousarray(b, dtype=np.int64)
    cdef const int64_t[:, ::1] av = am
    cdef const int64_t[:, ::1] bv = bm
    cdef Py_ssize_t rows = av.shape[0], inner = av.shape[1], cols = bv.shape[1]
    cdef Py_ssize_t i, j, k2
    cdef int f = frac_bits
    if not 1 <= f <= 20:
        raise ValueError("frac_bits out of supported range")
    if bv.shape[0] != inner:
        raise ValueError("shape mismatch")
    qout = np.empty((rows, cols), dtype=np.int64)
    rout = np.empty((rows, cols), dtype=np.int64)
    cdef int64_t[:, ::1] qv = qout
    cdef int64_t[:, ::1] rv = rout
    cdef int128_t acc, val
    cdef int64_t half = <int64_t>1 << (f - 1)
    cdef int64_t mask = (<int64_t>1 << f) - 1
    with nogil:
        for i in range(rows):
            for j in range(cols):
                acc = 0
                for k2 in range(inner):
                    acc += <int128_t>av[i, k2] * <int128_t>bv[k2, j]
                val = acc + half
                rv[i, j] = <int64_t>(val & <int128_t>mask)
                qv[i, j] = <int64_t>((val - (val & <int128_t>mask)) >> f)
    return qout, rout
