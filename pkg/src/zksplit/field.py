"""Arithmetic over GF(p), p = 2^61 - 1, and fixed-point encoding of real values.

Scalar operations work on plain canonical ints in [0, p); bulk operations on
numpy arrays live in ``zksplit._kernels``. Fixed-point values are signed
integers at ``frac_bits`` fractional bits, embedded into the field as
raw >= 0 -> raw and raw < 0 -> p - |raw|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EncodingOverflow

P = _kernels.P  # 2^61 - 1, Mersenne

DEFAULT_FRAC_BITS = 16
MAGNITUDE_BITS = 40  # |raw| < 2^40 for anything entering the proof circuit
HALF_P = P // 2


def add(a, b):
    return (a + b) % P


def sub(a, b):
    return (a - b) % P


def mul(a, b):
    return (a * b) % P


def neg(a):
    return (-a) % P


def inv(a):
    if a % P == 0:
        raise ZeroDivisionError("cannot invert 0 in GF(p)")
    return pow(a, P - 2, P)


def div(a, b):
    return mul(a, inv(b))


def rand_element(rng):
    """Uniform element of [0, p) from a random.Random or numpy Generator."""
    if hasattr(rng, "randrange"):
        return rng.randrange(P)
    return int(rng.integers(0, P))


def to_bytes(v):
    """Canonical 8-byte little-endian encoding of a field element."""
    return int(v).to_bytes(8, "little")


def from_bytes(data):
    v = int.from_bytes(data[:8], "little")
    if v >= P:
        raise ValueError("encoded value outside the field")
    return v


def from_signed(raw):
    """Signed integer (|raw| < p/2) -> canonical field element."""
    return raw % P


def to_signed(v):
    """Canonical field element -> signed integer under the centered embedding."""
    v %= P
    return v - P if v > HALF_P else v


@dataclass(frozen=True)
class FixedPoint:
    """A real value quantized as raw / 2^frac_bits."""

    raw: int
    frac_bits: int = DEFAULT_FRAC_BITS

    def to_float(self):
        return self.raw / (1 << self.frac_bits)

    def to_field(self):
        return from_signed(self.raw)

    def to_bytes(self):
        return self.raw.to_bytes(8, "little", signed=True) + bytes([self.frac_bits])

    @classmethod
    def from_bytes(cls, data):
        return cls(int.from_bytes(data[:8], "little", signed=True), data[8])


def fp_encode(x, frac_bits=DEFAULT_FRAC_BITS):
    """Quantize a real value (round-half-even); raises EncodingOverflow past the cap."""
    raw = round(float(x) * (1 << frac_bits))
    if abs(raw) >= 1 << MAGNITUDE_BITS:
        raise EncodingOverflow(f"|{x}| >= 2^{MAGNITUDE_BITS - frac_bits}")
    return FixedPoint(raw, frac_bits)


def fp_decode(fx):
    return fx.to_float()


def fp_to_field(fx):
    return fx.to_field()


def encode_array(x, frac_bits=DEFAULT_FRAC_BITS):
    """Vectorized fp_encode: float array -> int64 raw array (round-half-even)."""
    raw = np.rint(np.asarray(x, dtype=np.float64) * (1 << frac_bits))
    if not np.all(np.abs(raw) < float(1 << MAGNITUDE_BITS)):
        raise EncodingOverflow("array value past the fixed-point magnitude cap")
    return raw.astype(np.int64)


def decode_array(raw, frac_bits=DEFAULT_FRAC_BITS):
    return np.asarray(raw, dtype=np.float64) / (1 << frac_bits)
