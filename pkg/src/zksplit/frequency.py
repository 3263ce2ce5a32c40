"""Orthonormal DCT-II, square embedding, low-frequency mask, and poison scoring.

Two pipelines share the same mask and embedding:

* float: ``D = C @ M @ C.T`` in float64 - the oracle/baseline path;
* quantized: exact integer arithmetic on the fp-quantized ``C``, with one
  round-half-up right-shift by ``frac_bits`` after each matrix product. This
  path is normative inside proofs (prover and verifier compare identical
  integers) and also yields the remainder/quotient witnesses the circuit
  range-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import EncodingOverflow, ShapeError
from .field import DEFAULT_FRAC_BITS, MAGNITUDE_BITS, encode_array

_matrix_cache = {}


def dct_matrix_float(n):
    """Orthonormal DCT-II matrix: C[j,k] = sqrt(a_j/N) cos(pi (2k+1) j / (2N))."""
    j = np.arange(n)[:, None].astype(np.float64)
    k = np.cos(np.pi * (2 * np.arange(n)[None, :] + 1) * j / (2 * n))
    scale = np.sqrt(np.where(j == 0, 1.0, 2.0) / n)
    return scale * k


@dataclass(frozen=True)
class DctMatrix:
    """Per-size DCT operator: float entries plus their fixed-point quantization."""

    n: int
    frac_bits: int
    entries: np.ndarray      # float64, orthonormal
    quantized: np.ndarray    # int64 raw at frac_bits

    @classmethod
    def for_size(cls, n, frac_bits=DEFAULT_FRAC_BITS):
        key = (n, frac_bits)
        if key not in _matrix_cache:
            entries = dct_matrix_float(n)
            quantized = encode_array(entries, frac_bits)
            for arr in (entries, quantized):
                arr.flags.writeable = False
            _matrix_cache[key] = cls(n, frac_bits, entries, quantized)
        return _matrix_cache[key]


def side_length(count):
    return math.isqrt(count - 1) + 1 if count > 0 else 0


def embed_square(values):
    """Row-major fill of a flat array into the smallest square, zero padded."""
    flat = np.asarray(values)
    if flat.ndim != 1 or flat.size == 0:
        raise ShapeError("embedding expects a nonempty flat array")
    n = side_length(flat.size)
    out = np.zeros(n * n, dtype=flat.dtype)
    out[:flat.size] = flat
    return out.reshape(n, n)


def mask_indices(n):
    """Kept low-frequency cells: u + v < floor(N/2), row-major order."""
    half = n // 2
    cells = [(u, v) for u in range(half) for v in range(half - u)]
    return cells


def mask_bool(n):
    m = np.zeros((n, n), dtype=bool)
    for u, v in mask_indices(n):
        m[u, v] = True
    return m


def mask_size(n):
    half = n // 2
    return half * (half + 1) // 2


def dct2_float(mat):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError("dct2 expects a square matrix")
    c = DctMatrix.for_size(mat.shape[0]).entries
    return c @ mat @ c.T


def idct2_float(mat):
    mat = np.asarray(mat, dtype=np.float64)
    c = DctMatrix.for_size(mat.shape[0]).entries
    return c.T @ mat @ c


@dataclass(frozen=True)
class QuantizedDct:
    """Quantized 2-D DCT with the per-product rescale witnesses.

    c_q @ m       = 2^f * a + rho1 - 2^(f-1)   entrywise, 0 <= rho1 < 2^f
    a @ c_q^T     = 2^f * d + rho2 - 2^(f-1)   entrywise, 0 <= rho2 < 2^f
    """

    d: np.ndarray
    a: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray


def dct2_quantized(mat_raw, frac_bits=DEFAULT_FRAC_BITS):
    mat_raw = np.asarray(mat_raw, dtype=np.int64)
    if mat_raw.ndim != 2 or mat_raw.shape[0] != mat_raw.shape[1]:
        raise ShapeError("dct2 expects a square matrix")
    cq = DctMatrix.for_size(mat_raw.shape[0], frac_bits).quantized
    a, rho1 = K.rescale_matmul(cq, mat_raw, frac_bits)
    if int(np.max(np.abs(a), initial=0)) >= 1 << MAGNITUDE_BITS:
        raise EncodingOverflow("intermediate DCT magnitude past the circuit cap")
    d, rho2 = K.rescale_matmul(a, np.ascontiguousarray(cq.T), frac_bits)
    if int(np.max(np.abs(d), initial=0)) >= 1 << MAGNITUDE_BITS:
        raise EncodingOverflow("DCT magnitude past the circuit cap")
    return QuantizedDct(d=d, a=a, rho1=rho1, rho2=rho2)


def low_freq_taxicab(d):
    """Sum of |entries| over the kept low-frequency cells."""
    d = np.asarray(d)
    m = mask_bool(d.shape[0])
    if np.issubdtype(d.dtype, np.integer):
        return int(np.sum(np.abs(d[m]), dtype=np.int64))
    return float(np.sum(np.abs(d[m])))


def poison_score(update, frac_bits=None):
    """Quantized (normative) poison score of an update: exact nonnegative integer."""
    fb = update.frac_bits if frac_bits is None else frac_bits
    quant = dct2_quantized(embed_square(update.raw), fb)
    return low_freq_taxicab(quant.d)


def poison_score_float(update):
    return low_freq_taxicab(dct2_float(embed_square(update.to_floats())))


def masked_spectrum_float(update):
    """Low-frequency DCT coefficients of an update as a flat float vector."""
    d = dct2_float(embed_square(update.to_floats()))
    return np.array([d[u, v] for u, v in mask_indices(d.shape[0])])
