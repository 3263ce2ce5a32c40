"""IT-MAC authenticated values over GF(2^61 - 1), backed by a trusted dealer.

The correlation is mac = key + value * delta. The dealer hands the prover a
tape of (x_rand, mac) pairs and the verifier the matching keys; commitments
send the single correction d = x - x_rand, after which both sides hold an
authenticated x without the verifier learning it. All linear operations are
local. Real VOLE expansion is out of scope; the dealer is an in-process
trusted party seeded per session.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .field import P


@dataclass(frozen=True)
class AuthValue:
    """Prover side of one authenticated value."""

    value: int
    mac: int

    def __add__(self, other):
        if isinstance(other, AuthValue):
            return AuthValue((self.value + other.value) % P, (self.mac + other.mac) % P)
        return NotImplemented

    def scale(self, c):
        return AuthValue((self.value * c) % P, (self.mac * c) % P)

    def add_const(self, c):
        # Verifier mirrors this by key -= c * delta.
        return AuthValue((self.value + c) % P, self.mac)


@dataclass(frozen=True)
class AuthKey:
    """Verifier side of one authenticated value."""

    key: int

    def __add__(self, other):
        if isinstance(other, AuthKey):
            return AuthKey((self.key + other.key) % P)
        return NotImplemented

    def scale(self, c):
        return AuthKey((self.key * c) % P)

    def add_const(self, c, delta):
        return AuthKey((self.key - c * delta) % P)


class ProverTape:
    """Prover view of the dealer stream: (x_rand, mac) pairs."""

    def __init__(self, seed_x, seed_m):
        self._seed_x = seed_x
        self._seed_m = seed_m
        self.pos = 0

    def take(self, count):
        xs = K.uniform_mod(self._seed_x, self.pos, count)
        macs = K.uniform_mod(self._seed_m, self.pos, count)
        self.pos += count
        return xs, macs


class VerifierTape:
    """Verifier view of the dealer stream: keys (derived so mac = key + x*delta)."""

    def __init__(self, seed_x, seed_m, delta):
        self._seed_x = seed_x
        self._seed_m = seed_m
        self._delta = delta
        self.pos = 0

    def take(self, count):
        xs = K.uniform_mod(self._seed_x, self.pos, count)
        macs = K.uniform_mod(self._seed_m, self.pos, count)
        self.pos += count
        return K.submod(macs, K.mulmod(xs, self._delta))


class Dealer:
    """Trusted correlated-randomness dealer for one proof session.

    Generates x_rand and mac uniformly and defines key = mac - x_rand*delta,
    so both tapes can be derived independently from (seed, delta) and stay in
    lockstep as long as both sides consume the same counts.
    """

    def __init__(self, seed, delta):
        if not 0 < delta < P:
            raise ValueError("delta must be a nonzero field element")
        self.delta = delta
        self._seed_x = int(K.splitmix_raw(seed ^ 0xA5A5A5A5A5A5A5A5, 0, 1)[0])
        self._seed_m = int(K.splitmix_raw(seed ^ 0x3C3C3C3C3C3C3C3C, 0, 1)[0])

    def prover_tape(self):
        return ProverTape(self._seed_x, self._seed_m)

    def verifier_tape(self):
        return VerifierTape(self._seed_x, self._seed_m, self.delta)


def dealer_gen(count, delta, seed):
    """One-shot dealer batch: ([(x_rand, mac)], [key])."""
    if count < 1:
        raise ValueError("count must be >= 1")
    dealer = Dealer(seed, delta)
    xs, macs = dealer.prover_tape().take(count)
    keys = dealer.verifier_tape().take(count)
    prover_batch = [(int(x), int(m)) for x, m in zip(xs, macs)]
    return prover_batch, [int(k) for k in keys]


def commit(x, pair):
    """Authenticate x with a fresh dealer pair; returns (AuthValue, correction d)."""
    x_rand, mac = pair
    return AuthValue(x % P, mac), (x - x_rand) % P


def receive_commit(d, key, delta):
    """Verifier-side key update for a received correction d."""
    return AuthKey((key - d * delta) % P)


def open_value(av):
    """Prover's opening message."""
    return av.value, av.mac


def check_open(value, mac, ak, delta):
    """Verifier accepts an opening iff mac = key + value*delta."""
    return mac % P == (ak.key + value * delta) % P


def constant_key(c, delta):
    """Key of a public constant wire (prover mac is 0)."""
    return AuthKey((-c * delta) % P)


def uniform_perm(seed, n):
    """Deterministic permutation of range(n) from a SplitMix64-seeded shuffle."""
    order = list(range(n))
    stream = K.splitmix_raw(seed, 0, max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = int(stream[n - 1 - i] % np.uint64(i + 1))
        order[i], order[j] = order[j], order[i]
    return order
