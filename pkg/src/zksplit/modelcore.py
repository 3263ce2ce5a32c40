"""Parameter vectors, canonical serialization, hashing, and checkpoint bookkeeping.

The serialized form (also the on-disk ``.zkslm`` format and the unit shipped
between clients) is: magic ``ZKSL``, version byte, n as 8-byte LE, frac_bits
byte, then each raw entry as 8-byte LE two's complement. Hashes are SHA-256
over these bytes, so any two parties holding equal vectors agree on digests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import EncodingOverflow, ShapeError
from .field import DEFAULT_FRAC_BITS, MAGNITUDE_BITS, decode_array, encode_array

MAGIC = b"ZKSL"
VERSION = 1
HEADER_LEN = len(MAGIC) + 1 + 8 + 1


@dataclass(frozen=True)
class ParamVector:
    """Flat fixed-point parameter array: the client-side head+tail partition."""

    raw: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        arr = np.ascontiguousarray(self.raw, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeError("parameter vector must be 1-D and nonempty")
        if int(np.max(np.abs(arr), initial=0)) >= 1 << MAGNITUDE_BITS:
            raise EncodingOverflow("entry past the fixed-point magnitude cap")
        arr.flags.writeable = False
        object.__setattr__(self, "raw", arr)

    def __len__(self):
        return self.raw.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.frac_bits == other.frac_bits and np.array_equal(self.raw, other.raw)

    def to_floats(self):
        return decode_array(self.raw, self.frac_bits)

    @classmethod
    def from_floats(cls, values, frac_bits=DEFAULT_FRAC_BITS):
        return cls(encode_array(values, frac_bits), frac_bits)


def serialize(pv):
    header = MAGIC + bytes([VERSION]) + len(pv).to_bytes(8, "little") + bytes([pv.frac_bits])
    return header + pv.raw.astype("<i8").tobytes()


def deserialize(data):
    if data[:4] != MAGIC:
        raise ValueError("bad magic")
    if data[4] != VERSION:
        raise ValueError("unsupported version")
    n = int.from_bytes(data[5:13], "little")
    frac_bits = data[13]
    body = data[HEADER_LEN:HEADER_LEN + 8 * n]
    if len(body) != 8 * n:
        raise ValueError("truncated payload")
    return ParamVector(np.frombuffer(body, dtype="<i8").astype(np.int64), frac_bits)


def hash_model(pv):
    return hashlib.sha256(serialize(pv)).digest()


def hash_bytes(data):
    return hashlib.sha256(data).digest()


def save(pv, path):
    with open(path, "wb") as fh:
        fh.write(serialize(pv))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def make_update(new_model, checkpoint_model):
    """Entrywise raw difference new_model - checkpoint_model."""
    if len(new_model) != len(checkpoint_model) or new_model.frac_bits != checkpoint_model.frac_bits:
        raise ShapeError("model/checkpoint length or scale mismatch")
    return ParamVector(new_model.raw - checkpoint_model.raw, new_model.frac_bits)


def apply_update(checkpoint_model, update):
    if len(checkpoint_model) != len(update):
        raise ShapeError("length mismatch")
    return ParamVector(checkpoint_model.raw + update.raw, checkpoint_model.frac_bits)


@dataclass(frozen=True)
class Checkpoint:
    """One published client-side partition with its update and digests.

    ``blindings`` holds the per-verifier-chain blinding scalars for the
    currently registered algebraic digests of (model, update); they are
    refreshed whenever a prover re-registers the checkpoint and travel with
    the plaintext along the client chain.
    """

    model: ParamVector
    update: ParamVector
    origin_client: int
    round: int
    model_hash: bytes = b""
    update_hash: bytes = b""
    dct_hash: bytes = b""
    blindings: tuple = (0, 0, 0, 0)

    def __post_init__(self):
        if len(self.model) != len(self.update):
            raise ShapeError("model and update must have equal length")
        if not self.model_hash:
            object.__setattr__(self, "model_hash", hash_model(self.model))
        if not self.update_hash:
            object.__setattr__(self, "update_hash", hash_model(self.update))

    def with_blindings(self, blindings):
        return replace(self, blindings=tuple(blindings))


@dataclass(frozen=True)
class QueueState:
    """Rolling list of the k retained checkpoints plus the best-model pointer."""

    checkpoints: tuple
    bm_index: int

    def __post_init__(self):
        cps = tuple(self.checkpoints)
        object.__setattr__(self, "checkpoints", cps)
        if not cps:
            raise ShapeError("queue must be nonempty")
        if not 0 <= self.bm_index < len(cps):
            raise ShapeError("bm_index out of range")
        rounds = [c.round for c in cps]
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ShapeError("checkpoint rounds must strictly increase")

    @property
    def k(self):
        return len(self.checkpoints)

    @property
    def best(self):
        return self.checkpoints[self.bm_index]


def pretrained_queue(pretrained, k, frac_bits=DEFAULT_FRAC_BITS):
    """Queue of k copies of one pretrained checkpoint (zero updates), rounds -k+1..0."""
    zero = ParamVector(np.zeros(len(pretrained), dtype=np.int64), frac_bits)
    cps = [
        Checkpoint(model=pretrained, update=zero, origin_client=-1, round=r)
        for r in range(-k + 1, 1)
    ]
    return QueueState(checkpoints=tuple(cps), bm_index=k - 1)
