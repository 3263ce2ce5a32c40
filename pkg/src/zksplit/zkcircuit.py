"""Interactive proof sessions over IT-MAC authenticated wires.

The prover and verifier execute the same circuit program; every engine call
happens in the same order on both sides, so the dealer tapes stay in
lockstep. Linear operations are local; multiplications are checked with one
batched random-linear-combination product check per category; zero claims
fold into one opening per category. The composed defense statement proves,
for the k+1 window: digest binding of models and updates, the new update's
consistency, Freivalds consistency of each quantized DCT (with its rescale
witnesses range-checked), the masked absolute-sum scores, and the weighted
max/min comparisons behind the published removal and best-model choices.

Session flow (fixed): commits, CHALLENGE_R (Freivalds vector + digest point
reveals), OPEN_BATCH (blinded digest evaluations), CHALLENGE_BATCH (fold
seeds), OPEN_BATCH (fold responses), ASSERT_RESULT.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import frames, frequency
from .errors import ProofRejected, ProtocolStateError
from .field import DEFAULT_FRAC_BITS, MAGNITUDE_BITS, P
from .vole import Dealer

RANGE_BITS = MAGNITUDE_BITS          # witness magnitude window (signed, shifted)
COMPARE_BITS = 48                    # weighted-score difference window
ZERO_CATS = ("binding", "consistency", "freivalds", "decomp", "score", "compare")
MUL_CATS = ("bitcheck", "absprod")
TAG_PRIORITY = ("open", "binding", "consistency", "freivalds", "decomp",
                "bitcheck", "absprod", "score", "compare", "tape")


def _u64(a):
    return np.ascontiguousarray(a, dtype=np.uint64)


@dataclass(frozen=True)
class Wire:
    """One vector of authenticated wires: (vals, macs) or (keys,)."""

    arrays: tuple

    def __len__(self):
        return self.arrays[0].size


def _wmap(fn, *wires):
    return Wire(tuple(fn(*(w.arrays[i] for w in wires)) for i in range(len(wires[0].arrays))))


def wire_add(a, b):
    return _wmap(K.addmod, a, b)


def wire_sub(a, b):
    return _wmap(K.submod, a, b)


def wire_scale(a, c):
    c = int(c) % P
    return _wmap(lambda x: K.mulmod(x, c), a)


def wire_take(a, idx):
    idx = np.asarray(idx, dtype=np.intp)
    return Wire(tuple(arr[idx] for arr in a.arrays))


def wire_pad(a, total):
    def pad(arr):
        out = np.zeros(total, dtype=np.uint64)
        out[:arr.size] = arr
        return out
    return _wmap(pad, a)


def wire_matvec(a, vec, rows, cols):
    """Treat the wire as a row-major (rows, cols) matrix; multiply by a public vector."""
    vec = _u64(vec)
    return _wmap(lambda arr: K.matvec_mod(arr.reshape(rows, cols), vec), a)


def wire_pubmat(pubmat, a):
    """Multiply a public (m, len(a)) matrix by the wire vector."""
    pubmat = _u64(pubmat)
    return _wmap(lambda arr: K.matvec_mod(pubmat, arr), a)


def wire_dotpub(a, coeffs):
    """Public-coefficient inner product; returns a length-1 wire."""
    coeffs = _u64(coeffs)
    return _wmap(lambda arr: np.array([K.dot_mod(arr, coeffs)], dtype=np.uint64), a)


def wire_concat(ws):
    return Wire(tuple(np.concatenate([w.arrays[i] for w in ws]) for i in range(len(ws[0].arrays))))


class _EngineBase:
    def __init__(self, channel, session_id):
        self.channel = channel
        self.session_id = session_id
        self._phase = "commit"
        self._zero = {name: [] for name in ZERO_CATS}
        self._mul = {name: [] for name in MUL_CATS}
        self._mul_counts = {name: 0 for name in MUL_CATS}
        self._open_buf = []
        self.opened = []

    def _send(self, ftype, payload):
        self.channel.send(self.session_id, ftype, payload)

    def _recv(self, expect):
        sid, ftype, payload = self.channel.recv()
        if sid != self.session_id:
            raise ProtocolStateError("frame for a different session")
        if ftype == frames.ABORT:
            raise ProofRejected("abort", payload.decode("utf-8", "replace"))
        if ftype != expect:
            raise ProtocolStateError(
                f"expected {frames.TYPE_NAMES[expect]}, got {frames.TYPE_NAMES.get(ftype)}")
        return payload

    def assert_zero(self, w, cat):
        self._zero[cat].append(w)

    def bits_const(self, width):
        return K.powers_mod(2, width)


class ProverEngine(_EngineBase):
    role = "prover"

    def __init__(self, channel, tape, session_id):
        super().__init__(channel, session_id)
        self.tape = tape

    def commit(self, vals, count=None):
        vals = _u64(vals).reshape(-1)
        xr, macs = self.tape.take(vals.size)
        if self._phase != "commit":
            raise ProtocolStateError("commit after challenge phase")
        d = K.submod(vals, xr)
        self._send(frames.COMMIT_BATCH, struct.pack(">I", vals.size) + d.tobytes())
        return Wire((vals, macs))

    def const(self, arr):
        arr = _u64(arr).reshape(-1)
        return Wire((arr, np.zeros(arr.size, dtype=np.uint64)))

    def add_const(self, w, arr):
        arr = _u64(arr)
        return Wire((K.addmod(w.arrays[0], arr), w.arrays[1]))

    def mul_claim(self, x, y, z, cat):
        xv, xm = x.arrays
        yv, ym = y.arrays
        zm = z.arrays[1]
        a0 = K.mulmod(xm, ym)
        a1 = K.submod(K.addmod(K.mulmod(xv, ym), K.mulmod(yv, xm)), zm)
        self._mul[cat].append((a0, a1))
        self._mul_counts[cat] += xv.size

    def mul(self, x, y, cat):
        z = self.commit(K.mulmod(x.arrays[0], y.arrays[0]))
        self.mul_claim(x, y, z, cat)
        return z

    def assert_bits(self, b, cat="bitcheck"):
        self.mul_claim(b, b, b, cat)

    def challenge_round(self, r_count, reveal_count):
        self._phase = "challenged"
        payload = self._recv(frames.CHALLENGE_R)
        nr, ns = struct.unpack(">II", payload[:8])
        if (nr, ns) != (r_count, reveal_count):
            raise ProtocolStateError("challenge shape mismatch")
        r = np.frombuffer(payload[8:8 + 8 * nr], dtype="<u8").astype(np.uint64)
        s = np.frombuffer(payload[8 + 8 * nr:8 + 8 * (nr + ns)], dtype="<u8").astype(np.uint64)
        return r, s

    def open(self, w):
        self._open_buf.append(w)
        self.opened.append(w.arrays[0])
        return len(self.opened) - 1

    def finalize(self):
        vals = (np.concatenate([w.arrays[0] for w in self._open_buf])
                if self._open_buf else np.empty(0, dtype=np.uint64))
        macs = (np.concatenate([w.arrays[1] for w in self._open_buf])
                if self._open_buf else np.empty(0, dtype=np.uint64))
        self._send(frames.OPEN_BATCH,
                   struct.pack(">I", vals.size) + _u64(vals).tobytes() + _u64(macs).tobytes())
        payload = self._recv(frames.CHALLENGE_BATCH)
        seeds = struct.unpack(f">{len(ZERO_CATS) + len(MUL_CATS)}Q", payload)
        out = []
        pos = 0
        for name in ZERO_CATS:
            coeff_seed = seeds[pos]
            pos += 1
            claims = self._zero[name]
            total = sum(len(w) for w in claims)
            coeffs = K.uniform_mod(coeff_seed, 0, total)
            folded, off = 0, 0
            for w in claims:
                folded = (folded + K.dot_mod(w.arrays[1], coeffs[off:off + len(w)])) % P
                off += len(w)
            out.append(struct.pack(">Q", folded))
        for name in MUL_CATS:
            coeff_seed = seeds[pos]
            pos += 1
            mask_x, mask_mac = self.tape.take(1)
            total = self._mul_counts[name]
            coeffs = K.uniform_mod(coeff_seed, 0, total)
            u_val, v_val, off = int(mask_mac[0]), int(mask_x[0]), 0
            for a0, a1 in self._mul[name]:
                cs = coeffs[off:off + a0.size]
                u_val = (u_val + K.dot_mod(a0, cs)) % P
                v_val = (v_val + K.dot_mod(a1, cs)) % P
                off += a0.size
            out.append(struct.pack(">QQ", u_val, v_val))
        out.insert(0, struct.pack(">Q", self.tape.pos))
        self._send(frames.OPEN_BATCH, b"".join(out))
        payload = self._recv(frames.ASSERT_RESULT)
        ok = payload[0] == 1
        tag = payload[2:2 + payload[1]].decode("utf-8")
        return ok, tag


class VerifierEngine(_EngineBase):
    role = "verifier"

    def __init__(self, channel, tape, delta, session_id, challenge_seed, bound_points=()):
        super().__init__(channel, session_id)
        self.tape = tape
        self.delta = delta % P
        self._chseed = challenge_seed
        self._chpos = 0
        self._failures = set()
        self.revealed = []
        # Secret evaluation points of digests this verifier already holds; they
        # are revealed (and retired) only after the prover's commitments are in.
        self.bound_points = list(bound_points)

    def _draw(self, count):
        out = K.uniform_mod(self._chseed, self._chpos, count)
        self._chpos += count
        return out

    def commit(self, vals, count=None):
        if count is None:
            count = _u64(vals).size if vals is not None else 0
        if self._phase != "commit":
            raise ProtocolStateError("commit after challenge phase")
        keys = self.tape.take(count)
        payload = self._recv(frames.COMMIT_BATCH)
        (n,) = struct.unpack(">I", payload[:4])
        if n != count:
            raise ProtocolStateError("commit count mismatch")
        d = np.frombuffer(payload[4:4 + 8 * n], dtype="<u8").astype(np.uint64)
        return Wire((K.submod(keys, K.mulmod(d, self.delta)),))

    def const(self, arr):
        arr = _u64(arr).reshape(-1)
        return Wire((K.negmod(K.mulmod(arr, self.delta)),))

    def add_const(self, w, arr):
        arr = _u64(arr)
        return Wire((K.submod(w.arrays[0], K.mulmod(arr, self.delta)),))

    def mul_claim(self, x, y, z, cat):
        kx, ky, kz = x.arrays[0], y.arrays[0], z.arrays[0]
        b = K.addmod(K.mulmod(kx, ky), K.mulmod(kz, self.delta))
        self._mul[cat].append(b)
        self._mul_counts[cat] += kx.size

    def mul(self, x, y, cat):
        z = self.commit(None, count=len(x))
        self.mul_claim(x, y, z, cat)
        return z

    def assert_bits(self, b, cat="bitcheck"):
        self.mul_claim(b, b, b, cat)

    def challenge_round(self, r_count, reveal_count):
        self._phase = "challenged"
        r = self._draw(r_count)
        known = _u64(self.bound_points[:reveal_count])
        fresh = self._draw(reveal_count - known.size)
        s = np.concatenate([known, fresh])
        self.revealed = s
        self._send(frames.CHALLENGE_R,
                   struct.pack(">II", r_count, reveal_count) + _u64(r).tobytes() + _u64(s).tobytes())
        return r, s

    def open(self, w):
        self._open_buf.append(w)
        self.opened.append(None)
        return len(self.opened) - 1

    def finalize(self):
        payload = self._recv(frames.OPEN_BATCH)
        (n,) = struct.unpack(">I", payload[:4])
        vals = np.frombuffer(payload[4:4 + 8 * n], dtype="<u8").astype(np.uint64)
        macs = np.frombuffer(payload[4 + 8 * n:4 + 16 * n], dtype="<u8").astype(np.uint64)
        keys = (np.concatenate([w.arrays[0] for w in self._open_buf])
                if self._open_buf else np.empty(0, dtype=np.uint64))
        if n != keys.size:
            raise ProtocolStateError("open count mismatch")
        if n and not np.array_equal(macs, K.addmod(keys, K.mulmod(vals, self.delta))):
            self._failures.add("open")
        off = 0
        for i, w in enumerate(self._open_buf):
            self.opened[i] = vals[off:off + len(w)].copy()
            off += len(w)
        seeds = [int(s) for s in K.splitmix_raw(self._chseed ^ 0xF00D, self._chpos, len(ZERO_CATS) + len(MUL_CATS))]
        self._chpos += len(seeds)
        self._send(frames.CHALLENGE_BATCH, struct.pack(f">{len(seeds)}Q", *seeds))
        payload = self._recv(frames.OPEN_BATCH)
        (tape_pos,) = struct.unpack(">Q", payload[:8])
        off = 8
        pos = 0
        for name in ZERO_CATS:
            coeff_seed = seeds[pos]
            pos += 1
            (folded_mac,) = struct.unpack(">Q", payload[off:off + 8])
            off += 8
            claims = self._zero[name]
            total = sum(len(w) for w in claims)
            coeffs = K.uniform_mod(coeff_seed, 0, total)
            folded_key, coff = 0, 0
            for w in claims:
                folded_key = (folded_key + K.dot_mod(w.arrays[0], coeffs[coff:coff + len(w)])) % P
                coff += len(w)
            if folded_mac % P != folded_key:
                self._failures.add(name)
        for name in MUL_CATS:
            coeff_seed = seeds[pos]
            pos += 1
            u_val, v_val = struct.unpack(">QQ", payload[off:off + 16])
            off += 16
            mask_key = self.tape.take(1)
            total = self._mul_counts[name]
            coeffs = K.uniform_mod(coeff_seed, 0, total)
            w_val, coff = int(mask_key[0]), 0
            for b in self._mul[name]:
                w_val = (w_val + K.dot_mod(b, coeffs[coff:coff + b.size])) % P
                coff += b.size
            if (u_val - v_val * self.delta) % P != w_val:
                self._failures.add(name)
        if tape_pos != self.tape.pos:
            self._failures.add("tape")
        ok = not self._failures
        tag = "ok" if ok else next(t for t in TAG_PRIORITY if t in self._failures)
        self._send(frames.ASSERT_RESULT,
                   bytes([1 if ok else 0, len(tag)]) + tag.encode("utf-8"))
        return ok, tag


# -- statements and witnesses -------------------------------------------------


@dataclass(frozen=True)
class RoundStatement:
    """Public inputs of one defense-round proof."""

    n: int
    side: int
    frac_bits: int
    k: int
    weights: tuple            # k+1 integer score weights (den^2, num*den, ..., num^2)
    removed_index: int        # in the k+1 temporary list
    bm_index: int             # in the pruned k-list
    src_index: int            # temp-list index the new model was trained from
    s_wm: int                 # weighted score of the removed model (field element)
    s_bm: int                 # weighted score of the best model (field element)
    bound_digests: tuple      # h values for [models 0..k-1] + [updates 0..k-1]

    @property
    def bm_temp_index(self):
        return self.bm_index if self.bm_index < self.removed_index else self.bm_index + 1


@dataclass
class RoundWitness:
    """Prover-side private inputs (field-embedded uint64 arrays)."""

    models: list
    updates: list
    dcts: list                 # frequency.QuantizedDct per candidate
    bind_blindings: np.ndarray
    reg_blindings: np.ndarray
    abs_override: list | None = None   # cheat hook: forged |D| witnesses per candidate


@dataclass(frozen=True)
class RegisterStatement:
    """Mini-session: commit vectors and establish fresh blinded digests."""

    n: int
    count: int


@dataclass
class VerifierReport:
    ok: bool
    tag: str
    registered: list = field(default_factory=list)   # (secret point, opened digest)
    bytes_sent: int = 0
    bytes_received: int = 0


def embed_params(pv):
    """ParamVector -> field-embedded uint64 array."""
    return K.from_signed(pv.raw)


def _bit_decompose(vals, width):
    """Low `width` bits of each field value, LSB-first, flattened."""
    v = _u64(vals).reshape(-1, 1)
    shifts = np.arange(width, dtype=np.uint64)
    return ((v >> shifts) & np.uint64(1)).reshape(-1)


def make_round_witness(models, updates, statement, bind_blindings, reg_blindings):
    dcts = [frequency.dct2_quantized(frequency.embed_square(u.raw), statement.frac_bits)
            for u in updates]
    return RoundWitness(
        models=[embed_params(m) for m in models],
        updates=[embed_params(u) for u in updates],
        dcts=dcts,
        bind_blindings=_u64(bind_blindings),
        reg_blindings=_u64(reg_blindings),
    )


def _range_bits_prover(wire_vals, width):
    return _bit_decompose(wire_vals, width)


def _fold_bits(eng, bits_wire, count, width):
    return wire_matvec(bits_wire, eng.bits_const(width), count, width)


def _range_check(eng, value_wire, witness_vals, width, tie_cat):
    """Commit a bit decomposition of value_wire and tie it; proves value < 2^width."""
    count = len(value_wire)
    bits = eng.commit(_range_bits_prover(witness_vals, width) if witness_vals is not None else None,
                      count * width)
    eng.assert_bits(bits)
    folded = _fold_bits(eng, bits, count, width)
    eng.assert_zero(wire_sub(folded, value_wire), tie_cat)
    return bits


def defense_circuit(eng, st, wit):
    """Shared prover/verifier program for one defense-round statement."""
    n, side, f, k = st.n, st.side, st.frac_bits, st.k
    ncells = side * side
    count = k + 1
    cq = frequency.DctMatrix.for_size(side, f).quantized
    cq_field = K.from_signed(cq.reshape(-1)).reshape(side, side)
    cqt_field = np.ascontiguousarray(cq_field.T)
    mask_flat = np.array([u * side + v for u, v in frequency.mask_indices(side)], dtype=np.intp)
    half = (1 << (f - 1)) % P
    shift39 = (1 << (RANGE_BITS - 1)) % P

    # commit phase ----------------------------------------------------------
    n_bound = len(st.bound_digests)
    m_w = [eng.commit(wit.models[t] if wit else None, n) for t in range(count)]
    u_w = [eng.commit(wit.updates[t] if wit else None, n) for t in range(count)]
    bind_b = eng.commit(wit.bind_blindings if wit else None, n_bound)
    reg_b = eng.commit(wit.reg_blindings if wit else None, 2 * count)

    per_model = []
    for t in range(count):
        if wit:
            dct = wit.dcts[t]
            a_vals = K.from_signed(dct.a.reshape(-1))
            d_vals = K.from_signed(dct.d.reshape(-1))
            r1_vals = _u64(dct.rho1.reshape(-1))
            r2_vals = _u64(dct.rho2.reshape(-1))
        else:
            a_vals = d_vals = r1_vals = r2_vals = None
        a_w = eng.commit(a_vals, ncells)
        d_w = eng.commit(d_vals, ncells)
        rho1_w = eng.commit(r1_vals, ncells)
        rho2_w = eng.commit(r2_vals, ncells)

        a_shift = eng.add_const(a_w, np.full(ncells, shift39, dtype=np.uint64))
        _range_check(eng, a_shift,
                     K.addmod(a_vals, np.uint64(shift39)) if wit else None,
                     RANGE_BITS, "decomp")
        _range_check(eng, rho1_w, r1_vals if wit else None, f, "decomp")
        _range_check(eng, rho2_w, r2_vals if wit else None, f, "decomp")

        # |D| on the masked cells via sign-bit witnesses
        d_mask = wire_take(d_w, mask_flat)
        if wit:
            d_signed = K.to_signed(d_vals[mask_flat])
            sign_vals = (d_signed < 0).astype(np.uint64)
            abs_honest = np.abs(d_signed).astype(np.uint64)
        else:
            sign_vals = abs_honest = None
        sign_w = eng.commit(sign_vals, mask_flat.size)
        eng.assert_bits(sign_w)
        prod_w = eng.mul(sign_w, d_mask, "absprod")
        abs_w = wire_sub(d_mask, wire_scale(prod_w, 2))
        if wit is not None and wit.abs_override is not None and wit.abs_override[t] is not None:
            abs_honest = _u64(wit.abs_override[t])
        _range_check(eng, abs_w, abs_honest, RANGE_BITS, "score")
        per_model.append((a_w, d_w, rho1_w, rho2_w, abs_w))

    # weighted scores and comparison windows --------------------------------
    score_w = []
    ones = np.ones(mask_flat.size, dtype=np.uint64)
    for t in range(count):
        s_t = wire_dotpub(per_model[t][4], ones)
        score_w.append(wire_scale(s_t, st.weights[t] % P))
    rm = st.removed_index
    bm_t = st.bm_temp_index
    rm_diffs = [wire_sub(score_w[rm], score_w[j]) for j in range(count) if j != rm]
    bm_diffs = [wire_sub(score_w[j], score_w[bm_t])
                for j in range(count) if j != rm and j != bm_t]
    for group in (rm_diffs, bm_diffs):
        if not group:
            continue
        cat_wire = wire_concat(group)
        _range_check(eng, cat_wire, cat_wire.arrays[0] if wit else None,
                     COMPARE_BITS, "compare")

    # challenge: Freivalds vector + digest points ----------------------------
    reveal_count = n_bound + 2 * count
    r, s_all = eng.challenge_round(side, reveal_count)
    bound_s, fresh_s = s_all[:n_bound], s_all[n_bound:]

    # Freivalds: (2^f A + rho1 - half J) r = Cq (U r); (2^f D + rho2 - half J) r = A (Cq^T r)
    jr = K.sum_mod(r)
    half_jr = np.full(side, (half * jr) % P, dtype=np.uint64)
    v1 = K.matvec_mod(cqt_field, r)
    two_f = (1 << f) % P
    for t in range(count):
        a_w, d_w, rho1_w, rho2_w, _ = per_model[t]
        u_pad = wire_pad(u_w[t], ncells)
        u_r = wire_matvec(u_pad, r, side, side)
        lhs1 = wire_add(wire_scale(wire_matvec(a_w, r, side, side), two_f),
                        wire_matvec(rho1_w, r, side, side))
        lhs1 = eng.add_const(lhs1, K.negmod(half_jr))
        eng.assert_zero(wire_sub(lhs1, wire_pubmat(cq_field, u_r)), "freivalds")
        lhs2 = wire_add(wire_scale(wire_matvec(d_w, r, side, side), two_f),
                        wire_matvec(rho2_w, r, side, side))
        lhs2 = eng.add_const(lhs2, K.negmod(half_jr))
        eng.assert_zero(wire_sub(lhs2, wire_matvec(a_w, v1, side, side)), "freivalds")

    # digest binding of the k incoming models and updates --------------------
    bound_wires = (m_w[:k] + u_w[:k])[:n_bound]
    for i, w in enumerate(bound_wires):
        ev = wire_dotpub(w, K.powers_mod(int(bound_s[i]), n))
        ev = wire_add(ev, wire_take(bind_b, [i]))
        eng.assert_zero(eng.add_const(ev, np.array([(-st.bound_digests[i]) % P], dtype=np.uint64)),
                        "binding")

    # new-update consistency: U_k = M_k - M_src ------------------------------
    eng.assert_zero(wire_sub(u_w[k], wire_sub(m_w[k], m_w[st.src_index])), "consistency")

    # score equality against the public worst/best values --------------------
    eng.assert_zero(eng.add_const(score_w[rm], np.array([(-st.s_wm) % P], dtype=np.uint64)),
                    "score")
    eng.assert_zero(eng.add_const(score_w[bm_t], np.array([(-st.s_bm) % P], dtype=np.uint64)),
                    "score")

    # fresh digest registration for all k+1 models and updates ---------------
    reg_wires = m_w + u_w
    for i, w in enumerate(reg_wires):
        ev = wire_dotpub(w, K.powers_mod(int(fresh_s[i]), n))
        eng.open(wire_add(ev, wire_take(reg_b, [i])))

    return eng.finalize()


def registration_circuit(eng, st, vectors=None, blindings=None):
    """Commit vectors, receive fresh secret points, open the blinded digests."""
    wires = [eng.commit(vectors[i] if vectors is not None else None, st.n)
             for i in range(st.count)]
    b_w = eng.commit(blindings if blindings is not None else None, st.count)
    _, fresh_s = eng.challenge_round(0, st.count)
    for i, w in enumerate(wires):
        ev = wire_dotpub(w, K.powers_mod(int(fresh_s[i]), st.n))
        eng.open(wire_add(ev, wire_take(b_w, [i])))
    return eng.finalize()


# -- session plumbing ---------------------------------------------------------


def derive_session_params(session_seed):
    """(dealer seed, delta, challenge seed, session id) from one seed."""
    words = K.splitmix_raw(session_seed, 0, 6)
    delta = int(K.uniform_mod(session_seed ^ 0xDE17A, 0, 1)[0]) or 1
    sid = b"".join(int(w).to_bytes(8, "little") for w in words[4:6])
    return int(words[0]), delta, int(words[1]), sid


def run_prover_session(channel, session_seed, program, record=None):
    dealer_seed, delta, _, sid = derive_session_params(session_seed)
    dealer = Dealer(dealer_seed, delta)
    ch = frames.RecordingChannel(channel, record) if record is not None else channel
    eng = ProverEngine(ch, dealer.prover_tape(), sid)
    ok, tag = program(eng)
    return ok, tag, eng


def run_verifier_session(channel, session_seed, program, record=None, bound_points=()):
    dealer_seed, delta, chseed, sid = derive_session_params(session_seed)
    dealer = Dealer(dealer_seed, delta)
    ch = frames.RecordingChannel(channel, record) if record is not None else channel
    eng = VerifierEngine(ch, dealer.verifier_tape(), delta, sid, chseed, bound_points=bound_points)
    ok, tag = program(eng)
    return ok, tag, eng


def run_local_proof(prover_program, verifier_program, session_seed, timeout=30.0,
                    record_prover=None):
    """Run both sides over an in-process channel pair; returns their results."""
    ch_p, ch_v = frames.QueueChannel.pair(timeout=timeout)
    results = {}
    errors = []

    def _run(name, fn):
        try:
            results[name] = fn()
        except Exception as exc:  # propagated after join
            errors.append((name, exc))

    tv = threading.Thread(
        target=_run, args=("verifier", lambda: run_verifier_session(ch_v, session_seed, verifier_program)))
    tv.start()
    try:
        results["prover"] = run_prover_session(ch_p, session_seed, prover_program, record=record_prover)
    except Exception as exc:
        errors.append(("prover", exc))
    tv.join(timeout=timeout + 5)
    if errors:
        raise errors[0][1]
    return results["prover"], results["verifier"]


def simulate_registration_frames(st, session_seed):
    """Transcript simulator for the linear-only registration session.

    Every prover-side payload in a real registration session is a uniform
    field element (one-time-padded corrections, blinded evaluations, masked
    macs), so the simulated frames draw from the same uniform distribution
    using only the public statement and the session seed.
    """
    _, _, chseed, sid = derive_session_params(session_seed)
    sim_seed = session_seed ^ 0x51A151A1
    stream_pos = 0

    def draw(count):
        nonlocal stream_pos
        out = K.uniform_mod(sim_seed, stream_pos, count)
        stream_pos += count
        return out

    log = []
    for _ in range(st.count):
        d = draw(st.n)
        log.append(frames.Frame("sent", sid, frames.COMMIT_BATCH,
                                struct.pack(">I", st.n) + d.tobytes()))
    d = draw(st.count)
    log.append(frames.Frame("sent", sid, frames.COMMIT_BATCH,
                            struct.pack(">I", st.count) + d.tobytes()))
    s_vals = K.uniform_mod(chseed, 0, st.count)
    log.append(frames.Frame("received", sid, frames.CHALLENGE_R,
                            struct.pack(">II", 0, st.count) + s_vals.tobytes()))
    opens = draw(2 * st.count)
    log.append(frames.Frame("sent", sid, frames.OPEN_BATCH,
                            struct.pack(">I", st.count) + opens.tobytes()))
    seeds = [int(x) for x in K.splitmix_raw(chseed ^ 0xF00D, st.count, len(ZERO_CATS) + len(MUL_CATS))]
    log.append(frames.Frame("received", sid, frames.CHALLENGE_BATCH,
                            struct.pack(f">{len(seeds)}Q", *seeds)))
    tape_pos = st.n * st.count + st.count + len(MUL_CATS)
    body = [struct.pack(">Q", tape_pos)]
    for _ in ZERO_CATS:
        body.append(struct.pack(">Q", 0))
    for _ in MUL_CATS:
        u, v = draw(2)
        body.append(struct.pack(">QQ", int(u), int(v)))
    log.append(frames.Frame("sent", sid, frames.OPEN_BATCH, b"".join(body)))
    log.append(frames.Frame("received", sid, frames.ASSERT_RESULT, bytes([1, 2]) + b"ok"))
    return log


# -- single-op convenience surfaces (used by tests and the selftest) ----------


def prove_mul_batch(triples, session_seed):
    """Batched product check over claimed (x, y, z) triples; True iff accepted."""

    def program(eng):
        p = eng.role == "prover"
        if triples:
            xs = np.array([t[0] for t in triples], dtype=np.uint64)
            ys = np.array([t[1] for t in triples], dtype=np.uint64)
            zs = np.array([t[2] for t in triples], dtype=np.uint64)
            x = eng.commit(xs if p else None, len(triples))
            y = eng.commit(ys if p else None, len(triples))
            z = eng.commit(zs if p else None, len(triples))
            eng.mul_claim(x, y, z, "absprod")
        eng.challenge_round(0, 0)
        return eng.finalize()

    (_, _, _), (ok, tag, _) = run_local_proof(program, program, session_seed)
    return ok


def prove_range(value, width, session_seed):
    """Range proof: accepted iff 0 <= value < 2^width (bits are prover-derived)."""

    def program(eng):
        p = eng.role == "prover"
        w = eng.commit(np.array([value % P], dtype=np.uint64) if p else None, 1)
        _range_check(eng, w, w.arrays[0] if p else None, width, "decomp")
        eng.challenge_round(0, 0)
        return eng.finalize()

    (_, _, _), (ok, tag, _) = run_local_proof(program, program, session_seed)
    return ok


def prove_abs(x_signed, claimed_abs, claimed_sign, session_seed):
    """Absolute-value gadget: accepted iff claimed_abs = |x| (under the signed
    embedding) with a consistent sign bit and claimed_abs < 2^40."""

    x_field = int(x_signed) % P

    def program(eng):
        p = eng.role == "prover"
        x = eng.commit(np.array([x_field], dtype=np.uint64) if p else None, 1)
        s = eng.commit(np.array([claimed_sign], dtype=np.uint64) if p else None, 1)
        eng.assert_bits(s)
        w = eng.mul(s, x, "absprod")
        a = wire_sub(x, wire_scale(w, 2))
        _range_check(eng, a, np.array([claimed_abs % P], dtype=np.uint64) if p else None,
                     RANGE_BITS, "score")
        eng.challenge_round(0, 0)
        return eng.finalize()

    (_, _, _), (ok, tag, _) = run_local_proof(program, program, session_seed)
    return ok, tag


def prove_freivalds(update_raw, quant, frac_bits, session_seed):
    """Freivalds consistency of one committed quantized DCT against its update."""

    side = quant.d.shape[0]
    ncells = side * side
    u_field = K.from_signed(np.asarray(update_raw, dtype=np.int64))
    n = u_field.size
    cq = frequency.DctMatrix.for_size(side, frac_bits).quantized
    cq_field = K.from_signed(cq.reshape(-1)).reshape(side, side)
    cqt_field = np.ascontiguousarray(cq_field.T)
    half = (1 << (frac_bits - 1)) % P
    two_f = (1 << frac_bits) % P

    def program(eng):
        p = eng.role == "prover"
        u_w = eng.commit(u_field if p else None, n)
        a_w = eng.commit(K.from_signed(quant.a.reshape(-1)) if p else None, ncells)
        d_w = eng.commit(K.from_signed(quant.d.reshape(-1)) if p else None, ncells)
        r1_w = eng.commit(np.ascontiguousarray(quant.rho1.reshape(-1), dtype=np.uint64) if p else None, ncells)
        r2_w = eng.commit(np.ascontiguousarray(quant.rho2.reshape(-1), dtype=np.uint64) if p else None, ncells)
        r, _ = eng.challenge_round(side, 0)
        jr = K.sum_mod(r)
        half_jr = np.full(side, (half * jr) % P, dtype=np.uint64)
        v1 = K.matvec_mod(cqt_field, r)
        u_r = wire_matvec(wire_pad(u_w, ncells), r, side, side)
        lhs1 = wire_add(wire_scale(wire_matvec(a_w, r, side, side), two_f),
                        wire_matvec(r1_w, r, side, side))
        lhs1 = eng.add_const(lhs1, K.negmod(half_jr))
        eng.assert_zero(wire_sub(lhs1, wire_pubmat(cq_field, u_r)), "freivalds")
        lhs2 = wire_add(wire_scale(wire_matvec(d_w, r, side, side), two_f),
                        wire_matvec(r2_w, r, side, side))
        lhs2 = eng.add_const(lhs2, K.negmod(half_jr))
        eng.assert_zero(wire_sub(lhs2, wire_matvec(a_w, v1, side, side)), "freivalds")
        return eng.finalize()

    (_, _, peng), (ok, tag, veng) = run_local_proof(program, program, session_seed)
    return ok, tag


def prove_chain_digest(vector, blinding, digest, secret_point, session_seed,
                       claimed_vector=None, claimed_blinding=None):
    """Bind a committed vector to a previously registered blinded digest."""

    vec = _u64(claimed_vector if claimed_vector is not None else vector)
    blind = int(claimed_blinding if claimed_blinding is not None else blinding)
    n = vec.size

    def prover_prog(eng):
        w = eng.commit(vec, n)
        b = eng.commit(np.array([blind % P], dtype=np.uint64), 1)
        _, s_all = eng.challenge_round(0, 1)
        ev = wire_dotpub(w, K.powers_mod(int(s_all[0]), n))
        ev = wire_add(ev, b)
        eng.assert_zero(eng.add_const(ev, np.array([(-digest) % P], dtype=np.uint64)), "binding")
        return eng.finalize()

    def verifier_prog(eng):
        w = eng.commit(None, n)
        b = eng.commit(None, 1)
        _, s_all = eng.challenge_round(0, 1)
        ev = wire_dotpub(w, K.powers_mod(int(s_all[0]), n))
        ev = wire_add(ev, b)
        eng.assert_zero(eng.add_const(ev, np.array([(-digest) % P], dtype=np.uint64)), "binding")
        return eng.finalize()

    ch_p, ch_v = frames.QueueChannel.pair()
    result = {}
    tv = threading.Thread(target=lambda: result.update(v=run_verifier_session(
        ch_v, session_seed, verifier_prog, bound_points=[secret_point])))
    tv.start()
    run_prover_session(ch_p, session_seed, prover_prog)
    tv.join()
    ok, tag, _ = result["v"]
    return ok, tag


def register_digest(vector, blinding, session_seed):
    """One-vector registration; returns (secret point, digest) as the verifier
    records them."""
    vec = _u64(vector)
    st = RegisterStatement(n=vec.size, count=1)
    ch_p, ch_v = frames.QueueChannel.pair()
    result = {}
    tv = threading.Thread(target=lambda: result.update(v=run_verifier_session(
        ch_v, session_seed, lambda e: registration_circuit(e, st))))
    tv.start()
    run_prover_session(ch_p, session_seed,
                       lambda e: registration_circuit(e, st, [vec],
                                                      np.array([blinding % P], dtype=np.uint64)))
    tv.join()
    _, _, veng = result["v"]
    return int(veng.revealed[0]), int(veng.opened[0][0])
