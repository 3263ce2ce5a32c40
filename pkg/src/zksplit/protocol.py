"""End-to-end round engine: message-passing client/server state machines.

One round (client turn): the client receives the checkpoint queue from the
previous holder and the digest bundle from the server, cross-checks hashes,
trains over the split exchange (activations and gradients are the only
payloads crossing the server boundary), scores and prunes the k+1 candidates,
proves the round to two verifiers in parallel (the server, which binds the
window to its digest registry, and the next client), then forwards the pruned
queue. A failed check aborts the round with a named culprit; the authoritative
queue stays with the last accepted holder and the culprit is dropped from the
rotation.

All inter-party traffic is binary RoundMessages over duplex links (in-process
queues by default, loopback TCP optionally); proof frames ride inside
ProofFrame messages on the same links, so the privacy audit sees every
server-bound byte.
"""

from __future__ import annotations

import dataclasses
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import defense, frames, frequency, trainer, zkcircuit
from .errors import ConfigError, ProofRejected, ProtocolStateError
from .field import P
from .modelcore import (Checkpoint, ParamVector, QueueState, hash_model,
                        make_update, serialize, deserialize, MAGIC, VERSION)

MSG_MODELS = 1
MSG_HASHES = 2
MSG_ACT = 3
MSG_GRAD = 4
MSG_PROOF = 5
MSG_ABORT = 6

SERVER = -1


def pack_msg(tag, rnd, sender, receiver, payload):
    return struct.pack(">BiHH", tag, rnd, sender & 0xFFFF, receiver & 0xFFFF) + payload


def unpack_msg(data):
    tag, rnd, sender, receiver = struct.unpack(">BiHH", data[:9])
    if sender == 0xFFFF:
        sender = SERVER
    if receiver == 0xFFFF:
        receiver = SERVER
    return tag, rnd, sender, receiver, data[9:]


class QueueDuplex:
    """One endpoint of an in-process duplex byte link."""

    def __init__(self, inbox, outbox, timeout):
        self._inbox, self._outbox = inbox, outbox
        self.timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0
        self.drop_next = False

    @classmethod
    def pair(cls, timeout):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send(self, data):
        if self.drop_next:
            self.drop_next = False
            return
        self.bytes_sent += len(data)
        self._outbox.put(data)

    def recv(self):
        try:
            data = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolStateError("message receive timed out") from None
        self.bytes_received += len(data)
        return data


class SocketDuplex:
    """The same contract over a connected TCP socket (4-byte BE length frames)."""

    def __init__(self, sock, timeout):
        self._sock = sock
        self._sock.settimeout(timeout)
        self.bytes_sent = 0
        self.bytes_received = 0
        self.drop_next = False
        self._lock = threading.Lock()

    def send(self, data):
        if self.drop_next:
            self.drop_next = False
            return
        with self._lock:
            self._sock.sendall(struct.pack(">I", len(data)) + data)
        self.bytes_sent += len(data)

    def _read_exact(self, count):
        buf = bytearray()
        while len(buf) < count:
            try:
                chunk = self._sock.recv(count - len(buf))
            except socket.timeout:
                raise ProtocolStateError("socket receive timed out") from None
            if not chunk:
                raise ProtocolStateError("socket closed")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self):
        (length,) = struct.unpack(">I", self._read_exact(4))
        data = self._read_exact(length)
        self.bytes_received += 4 + length
        return data


class Router:
    """Lazily created duplex links between actors (client ids and SERVER)."""

    def __init__(self, transport="inproc", timeout=30.0):
        self.transport = transport
        self.timeout = timeout
        self._edges = {}

    def edge(self, a, b):
        """Endpoint for `a` on the (a, b) link."""
        key = (min(a, b), max(a, b))
        if key not in self._edges:
            if self.transport == "tcp":
                lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                lst.bind(("127.0.0.1", 0))
                lst.listen(1)
                c1 = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                c1.connect(lst.getsockname())
                c2, _ = lst.accept()
                lst.close()
                self._edges[key] = (SocketDuplex(c1, self.timeout), SocketDuplex(c2, self.timeout))
            else:
                self._edges[key] = QueueDuplex.pair(self.timeout)
        end_a, end_b = self._edges[key]
        return end_a if a == key[0] else end_b


class ProofLink:
    """Adapts a duplex link to the zk-session channel API by wrapping frames
    in ProofFrame round messages."""

    def __init__(self, duplex, rnd, me, peer, audit=None):
        self.duplex = duplex
        self.rnd = rnd
        self.me = me
        self.peer = peer
        self.audit = audit
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, session_id, ftype, payload):
        frame = frames.pack_frame(session_id, ftype, payload)
        msg = pack_msg(MSG_PROOF, self.rnd, self.me, self.peer, frame)
        self.bytes_sent += len(msg)
        self.duplex.send(msg)

    def recv(self):
        data = self.duplex.recv()
        tag, rnd, sender, receiver, payload = unpack_msg(data)
        if self.audit is not None:
            self.audit.scan(tag, payload)
        if tag != MSG_PROOF or rnd != self.rnd:
            raise ProtocolStateError("unexpected message inside proof session")
        self.bytes_received += len(data)
        return frames.unpack_frame(payload[4:])


class PrivacyAudit:
    """Transport-level scan of server-bound traffic (R3)."""

    def __init__(self, n):
        self.header = MAGIC + bytes([VERSION]) + int(n).to_bytes(8, "little")
        self.tag_counts = {}
        self.violations = []

    def scan(self, tag, payload):
        self.tag_counts[tag] = self.tag_counts.get(tag, 0) + 1
        if tag == MSG_MODELS:
            self.violations.append("model queue message reached the server")
        if self.header in payload:
            self.violations.append("serialized parameter frame in server-bound bytes")


# -- message payloads ---------------------------------------------------------


def pack_checkpoint(cp):
    model_b = serialize(cp.model)
    update_b = serialize(cp.update)
    head = struct.pack(">iH", cp.round, cp.origin_client & 0xFFFF)
    blinds = struct.pack(">4Q", *(int(b) % P for b in cp.blindings))
    return (head + blinds + cp.model_hash + cp.update_hash + cp.dct_hash
            + struct.pack(">I", len(model_b)) + model_b
            + struct.pack(">I", len(update_b)) + update_b)


def unpack_checkpoint(data, off):
    rnd, origin = struct.unpack(">iH", data[off:off + 6])
    if origin == 0xFFFF:
        origin = -1
    off += 6
    blinds = struct.unpack(">4Q", data[off:off + 32])
    off += 32
    mh, uh, dh = data[off:off + 32], data[off + 32:off + 64], data[off + 64:off + 96]
    off += 96
    (ml,) = struct.unpack(">I", data[off:off + 4])
    off += 4
    model = deserialize(data[off:off + ml])
    off += ml
    (ul,) = struct.unpack(">I", data[off:off + 4])
    off += 4
    update = deserialize(data[off:off + ul])
    off += ul
    cp = Checkpoint(model=model, update=update, origin_client=origin, round=rnd,
                    model_hash=mh, update_hash=uh, dct_hash=dh, blindings=blinds)
    return cp, off


def pack_models_msg(queue_state, session_id):
    body = [struct.pack(">BB", queue_state.bm_index, queue_state.k), session_id]
    for cp in queue_state.checkpoints:
        body.append(pack_checkpoint(cp))
    return b"".join(body)


def unpack_models_msg(payload):
    bm, count = struct.unpack(">BB", payload[:2])
    session_id = payload[2:18]
    off = 18
    cps = []
    for _ in range(count):
        cp, off = unpack_checkpoint(payload, off)
        cps.append(cp)
    return QueueState(checkpoints=tuple(cps), bm_index=bm), session_id


def pack_hash_bundle(items):
    """items: list of (round, model_hash, update_hash, dct_hash, h_model, h_update)."""
    body = [struct.pack(">B", len(items))]
    for rnd, mh, uh, dh, hm, hu in items:
        body.append(struct.pack(">i", rnd) + mh + uh + dh + struct.pack(">QQ", hm, hu))
    return b"".join(body)


def unpack_hash_bundle(payload):
    (count,) = struct.unpack(">B", payload[:1])
    off = 1
    items = []
    for _ in range(count):
        (rnd,) = struct.unpack(">i", payload[off:off + 4])
        off += 4
        mh, uh, dh = payload[off:off + 32], payload[off + 32:off + 64], payload[off + 64:off + 96]
        off += 96
        hm, hu = struct.unpack(">QQ", payload[off:off + 16])
        off += 16
        items.append((rnd, mh, uh, dh, hm, hu))
    return items


def pack_array(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return struct.pack(">HH", arr.shape[0], arr.shape[1]) + arr.tobytes()


def unpack_array(data, off=0):
    rows, cols = struct.unpack(">HH", data[off:off + 4])
    arr = np.frombuffer(data[off + 4:off + 4 + 8 * rows * cols], dtype=np.float64)
    return arr.reshape(rows, cols).copy(), off + 4 + 8 * rows * cols


class RemoteBackboneSession:
    """Client-side proxy: backbone forward/backward via messages."""

    def __init__(self, duplex, rnd, me, bm_round):
        self.duplex = duplex
        self.rnd = rnd
        self.me = me
        self.bm_round = bm_round
        self.state = None   # lives on the server

    def forward(self, a0):
        payload = struct.pack(">Bi", 0, self.bm_round) + pack_array(a0)
        self.duplex.send(pack_msg(MSG_ACT, self.rnd, self.me, SERVER, payload))
        tag, _, _, _, resp = unpack_msg(self.duplex.recv())
        if tag != MSG_ACT:
            raise ProtocolStateError("expected activations from server")
        a2, _ = unpack_array(resp)
        return a2

    def backward(self, da2):
        self.duplex.send(pack_msg(MSG_GRAD, self.rnd, self.me, SERVER, pack_array(da2)))
        tag, _, _, _, resp = unpack_msg(self.duplex.recv())
        if tag != MSG_GRAD:
            raise ProtocolStateError("expected gradients from server")
        da0, _ = unpack_array(resp)
        return da0

    def finish(self):
        payload = struct.pack(">Bi", 1, self.bm_round) + pack_array(np.zeros((0, 0)))
        self.duplex.send(pack_msg(MSG_ACT, self.rnd, self.me, SERVER, payload))


def server_training_loop(duplex, backbones, lr, audit, out):
    """Server half of one training turn; stores the trained backbone in `out`."""
    session = None
    while True:
        data = duplex.recv()
        tag, rnd, sender, receiver, payload = unpack_msg(data)
        audit.scan(tag, payload)
        if tag == MSG_ACT:
            kind, bm_round = struct.unpack(">Bi", payload[:5])
            if kind == 1:
                out["state"] = session.state if session else None
                return
            if session is None:
                session = trainer.LocalBackboneSession(
                    trainer.clone_backbone(backbones[bm_round]), lr)
            a0, _ = unpack_array(payload, 5)
            a2 = session.forward(a0)
            duplex.send(pack_msg(MSG_ACT, rnd, SERVER, sender, pack_array(a2)))
        elif tag == MSG_GRAD:
            da2, _ = unpack_array(payload)
            da0 = session.backward(da2)
            duplex.send(pack_msg(MSG_GRAD, rnd, SERVER, sender, pack_array(da0)))
        else:
            raise ProtocolStateError(f"unexpected tag {tag} during training")


# -- experiment engine --------------------------------------------------------


@dataclass
class ClientRole:
    cid: int
    shard: trainer.DataShard
    malicious: bool
    cheat: str = ""
    # verifier-side records from the round this client last verified:
    # per registered slot (s point, opened digest), plus the session id.
    verifier_records: list = field(default_factory=list)
    verifier_session_id: bytes = b""
    verifier_verdict: tuple = (True, "ok")


class ServerRole:
    """Backbone list, hash registry, and digest registry; never sees plaintext
    head/tail parameters."""

    def __init__(self, lr):
        self.lr = lr
        self.backbones = {}
        self.hash_registry = {}     # round -> (model_hash, update_hash, dct_hash)
        self.digest_registry = {}   # (round, kind) -> (secret point, digest)

    def bundle_for(self, rounds):
        items = []
        for r in rounds:
            mh, uh, dh = self.hash_registry[r]
            hm = self.digest_registry.get((r, "model"), (0, 0))[1]
            hu = self.digest_registry.get((r, "update"), (0, 0))[1]
            items.append((r, mh, uh, dh, hm, hu))
        return items

    def prune(self, keep_rounds):
        keep = set(keep_rounds)
        self.backbones = {r: b for r, b in self.backbones.items() if r in keep}
        self.digest_registry = {key: v for key, v in self.digest_registry.items()
                                if key[0] in keep}


def _dct_hash(update, frac_bits):
    quant = frequency.dct2_quantized(frequency.embed_square(update.raw), frac_bits)
    return hash_model(ParamVector(quant.d.reshape(-1), frac_bits))


def _session_seed(run_seed, rnd, domain):
    return int(K.splitmix_raw((run_seed << 8) ^ (rnd & 0xFFFFFF), domain, 1)[0])


class ExperimentBase:
    """Setup half of one seeded experiment run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.arch = trainer.ArchSpec(cfg.d_in, cfg.h1, cfg.h2, cfg.classes)
        self.n = self.arch.client_param_count
        self.side = frequency.side_length(self.n)
        self.params = defense.DefenseParams(cfg.k, cfg.beta_num, cfg.beta_den)
        self.poison = trainer.PoisonSpec(target_label=cfg.target_label, pdr=cfg.pdr)
        self.hyper = trainer.Hyper(cfg.lr, cfg.epochs, cfg.batch)
        self.mal_hyper = trainer.Hyper(cfg.mal_lr, cfg.mal_epochs, cfg.batch)
        self.audit = PrivacyAudit(self.n)
        self.router = Router(cfg.transport, cfg.timeout_s)
        self.log = []
        self.poisoned_rounds = set()
        self.dropped = set()
        self.drop_round = None        # test hook: drop one queue delivery
        self._load_data()
        self.server = ServerRole(cfg.lr)
        self.scorer = self._make_scorer()

    # -- setup ---------------------------------------------------------------

    def _load_data(self):
        cfg = self.cfg
        if cfg.dataset == "synthetic":
            x, y = trainer.make_blobs(cfg.seed, cfg.seed * 31 + 1, cfg.samples, cfg.d_in, cfg.classes)
            self.test_x, self.test_y = trainer.make_blobs(
                cfg.seed, cfg.seed * 31 + 2, cfg.test_samples, cfg.d_in, cfg.classes)
        else:
            x, y = trainer.load_csv_dataset(cfg.dataset)
            split = max(1, int(0.8 * len(y)))
            x, self.test_x = x[:split], x[split:]
            y, self.test_y = y[:split], y[split:]
        shards = trainer.partition_dataset(x, y, cfg.clients, cfg.iid, cfg.seed * 7 + 3)
        order = np.random.default_rng(cfg.seed * 11 + 5).permutation(cfg.clients)
        mal_count = int(round(cfg.pmr * cfg.clients))
        mal = set(int(i) for i in order[:mal_count])
        self.clients = [
            ClientRole(cid=i, shard=shards[i], malicious=(i in mal),
                       cheat=cfg.cheat if i in mal else "")
            for i in range(cfg.clients)
        ]

    def _make_scorer(self):
        if self.cfg.defense == "metric-ablation":
            return defense.SCORERS[self.cfg.metric]()
        return defense.QuantizedTaxicabScorer()

    def _register_vectors(self, rnd, owner, cps, verify_with_server=True):
        """Registration mini-session with the server for freshly published
        checkpoints; stores (s, h) pairs and returns per-checkpoint blindings."""
        seed = _session_seed(self.cfg.seed, rnd, 0xE0 + (owner & 0xF))
        vectors, blinds = [], []
        rng_b = K.uniform_mod(seed ^ 0xB11D, 0, 2 * len(cps))
        for cp in cps:
            vectors.append(zkcircuit.embed_params(cp.model))
            vectors.append(zkcircuit.embed_params(cp.update))
        st = zkcircuit.RegisterStatement(n=self.n, count=2 * len(cps))
        duplex_c = self.router.edge(owner, SERVER)
        duplex_s = self.router.edge(SERVER, owner)
        res = {}
        tv = threading.Thread(target=lambda: res.update(v=zkcircuit.run_verifier_session(
            ProofLink(duplex_s, rnd, SERVER, owner, audit=self.audit), seed,
            lambda e: zkcircuit.registration_circuit(e, st))))
        tv.start()
        zkcircuit.run_prover_session(
            ProofLink(duplex_c, rnd, owner, SERVER), seed,
            lambda e: zkcircuit.registration_circuit(e, st, vectors, rng_b))
        tv.join(timeout=self.cfg.timeout_s + 5)
        _, _, veng = res["v"]
        for i, cp in enumerate(cps):
            s_m, s_u = int(veng.revealed[2 * i]), int(veng.revealed[2 * i + 1])
            h_m, h_u = int(veng.opened[2 * i][0]), int(veng.opened[2 * i + 1][0])
            self.server.digest_registry[(cp.round, "model")] = (s_m, h_m)
            self.server.digest_registry[(cp.round, "update")] = (s_u, h_u)
            blinds.append((int(rng_b[2 * i]), int(rng_b[2 * i + 1]), 0, 0))
        return blinds

    def _publish(self, cp):
        self.server.hash_registry[cp.round] = (cp.model_hash, cp.update_hash, cp.dct_hash)

    def _bootstrap_checkpoint(self, rnd, shard_owner, src_model, src_backbone, poison_spec, hyper):
        new_p, new_b = trainer.train_round(
            src_model, src_backbone, self.clients[shard_owner].shard, poison_spec,
            hyper, self.arch, seed=_session_seed(self.cfg.seed, rnd, 0x7A),
            frac_bits=self.cfg.frac_bits)
        update = make_update(new_p, src_model)
        cp = Checkpoint(model=new_p, update=update, origin_client=shard_owner, round=rnd,
                        dct_hash=_dct_hash(update, self.cfg.frac_bits))
        self.server.backbones[rnd] = new_b
        return cp

    def _init_state(self):
        cfg = self.cfg
        base_model = trainer.init_client_params(self.arch, cfg.seed * 97 + 11, cfg.frac_bits)
        base_backbone = trainer.init_backbone(self.arch, cfg.seed * 97 + 13)
        self.server.backbones[-10**6] = base_backbone
        if cfg.init == "secure-init":
            cps = []
            for idx in range(cfg.clients):
                rnd = -cfg.clients + 1 + idx
                role = self.clients[idx]
                spec = self.poison if role.malicious else None
                hyper = self.mal_hyper if role.malicious else self.hyper
                cp = self._bootstrap_checkpoint(rnd, idx, base_model, base_backbone, spec, hyper)
                if role.malicious:
                    self.poisoned_rounds.add(rnd)
                self._publish(cp)
                blinds = self._register_vectors(rnd, idx, [cp])
                cps.append(cp.with_blindings(blinds[0]))
            queue_state, _ = defense.secure_init_select(cps, cfg.k, self.scorer)
            holder = cfg.clients - 1
        else:
            benign = [c.cid for c in self.clients if not c.malicious]
            cps = []
            cur_model, cur_back = base_model, base_backbone
            for j in range(cfg.k):
                rnd = -cfg.k + 1 + j
                owner = benign[j % len(benign)]
                cp = self._bootstrap_checkpoint(rnd, owner, cur_model, cur_back, None, self.hyper)
                self._publish(cp)
                blinds = self._register_vectors(rnd, owner, [cp])
                cps.append(cp.with_blindings(blinds[0]))
                cur_model = cp.model
                cur_back = self.server.backbones[rnd]
            queue_state = QueueState(checkpoints=tuple(cps), bm_index=cfg.k - 1)
            holder = benign[0]
        self.server.prune([c.round for c in queue_state.checkpoints])
        return queue_state, holder

    # -- per-round helpers ----------------------------------------------------

    def _rotation(self):
        order = [c.cid for c in self.clients]
        i = 0
        while True:
            cid = order[i % len(order)]
            i += 1
            if cid not in self.dropped:
                yield cid

    def _deliver_queue(self, holder, target, rnd, queue_state, session_id):
        payload = pack_models_msg(queue_state, session_id)
        if holder == target:
            return unpack_models_msg(payload)
        msg = pack_msg(MSG_MODELS, rnd, holder, target, payload)
        duplex = self.router.edge(holder, target)
        if self.drop_round == rnd:
            duplex.drop_next = True
            self.drop_round = None
        duplex.send(msg)
        data = self.router.edge(target, holder).recv()
        tag, _, _, _, body = unpack_msg(data)
        if tag != MSG_MODELS:
            raise ProtocolStateError("expected the checkpoint queue")
        return unpack_models_msg(body)

    def _server_bundle(self, rnd, target, rounds):
        payload = pack_hash_bundle(self.server.bundle_for(rounds))
        msg = pack_msg(MSG_HASHES, rnd, SERVER, target, payload)
        self.router.edge(SERVER, target).send(msg)
        data = self.router.edge(target, SERVER).recv()
        return unpack_hash_bundle(unpack_msg(data)[4])

    def _check_incoming(self, role, queue_state, bundle):
        """Step 2: hash checks against the server bundle plus the offline audit
        of the digests this client itself registered as last round's verifier."""
        by_round = {item[0]: item for item in bundle}
        for cp in queue_state.checkpoints:
            if cp.round not in by_round:
                return "missing hash record"
            _, mh, uh, dh, _, _ = by_round[cp.round]
            if hash_model(cp.model) != mh or cp.model_hash != mh:
                return "model hash mismatch"
            if hash_model(cp.update) != uh or cp.update_hash != uh:
                return "update hash mismatch"
            if _dct_hash(cp.update, self.cfg.frac_bits) != dh:
                return "dct hash mismatch"
        if role.verifier_records:
            rec = {rnd: (sm, hm, su, hu)
                   for rnd, sm, hm, su, hu in role.verifier_records}
            for cp in queue_state.checkpoints:
                if cp.round not in rec:
                    continue
                s_m, h_m, s_u, h_u = rec[cp.round]
                bm_c, bu_c = int(cp.blindings[2]), int(cp.blindings[3])
                ev_m = (bm_c + K.eval_poly(zkcircuit.embed_params(cp.model), s_m)) % P
                ev_u = (bu_c + K.eval_poly(zkcircuit.embed_params(cp.update), s_u)) % P
                if ev_m != h_m or ev_u != h_u:
                    return "registered digest mismatch"
        if not role.verifier_verdict[0]:
            return f"previous proof rejected [{role.verifier_verdict[1]}]"
        return None

    def _train(self, role, rnd, src_cp):
        spec = self.poison if role.malicious else None
        hyper = self.mal_hyper if role.malicious else self.hyper
        duplex_c = self.router.edge(role.cid, SERVER)
        duplex_s = self.router.edge(SERVER, role.cid)
        proxy = RemoteBackboneSession(duplex_c, rnd, role.cid, src_cp.round)
        out = {}
        ts = threading.Thread(target=server_training_loop,
                              args=(duplex_s, self.server.backbones, self.server.lr,
                                    self.audit, out))
        ts.start()
        new_p, _ = trainer.train_round(
            src_cp.model, None, role.shard, spec, hyper, self.arch,
            seed=_session_seed(self.cfg.seed, rnd, 0x7A), frac_bits=self.cfg.frac_bits,
            backbone_session=proxy)
        proxy.finish()
        ts.join(timeout=self.cfg.timeout_s + 5)
        new_backbone = out.get("state") or trainer.clone_backbone(
            self.server.backbones[src_cp.round])
        if role.malicious and role.cheat == "freq-aware":
            new_p = self._dampen_low_freq(new_p, src_cp.model)
        update = make_update(new_p, src_cp.model)
        cp = Checkpoint(model=new_p, update=update, origin_client=role.cid, round=rnd,
                        dct_hash=_dct_hash(update, self.cfg.frac_bits))
        return cp, new_backbone

    def _dampen_low_freq(self, new_p, src_model, factor=0.25):
        """Frequency-aware attacker: shrink the update's low-frequency mass."""
        u = new_p.to_floats() - src_model.to_floats()
        mat = frequency.embed_square(u)
        spec = frequency.dct2_float(mat)
        for uu, vv in frequency.mask_indices(spec.shape[0]):
            spec[uu, vv] *= factor
        damped = frequency.idct2_float(spec).reshape(-1)[:len(u)]
        floats = src_model.to_floats() + damped
        return ParamVector.from_floats(floats, self.cfg.frac_bits)


class AbortRound(Exception):
    def __init__(self, culprit, reason, drop):
        self.culprit = culprit
        self.reason = reason
        self.drop = drop
        super().__init__(reason)


@dataclass
class DefensePlan:
    queue: QueueState
    outcome: defense.DefenseOutcome
    scores_claimed: list
    s_wm: int = 0
    s_bm: int = 0
    dcts: list = None
    abs_override: list = None
    substitute_index: int = -1


def _prune_with_scores(queue_state, new_cp, params, raw):
    weights = params.weights(len(raw))
    adjusted = [w * s for w, s in zip(weights, raw)]
    removed = max(range(len(adjusted)), key=lambda i: (adjusted[i], -i))
    candidates = list(queue_state.checkpoints) + [new_cp]
    survivors = [c for i, c in enumerate(candidates) if i != removed]
    surviving = [a for i, a in enumerate(adjusted) if i != removed]
    bm = min(range(len(surviving)), key=lambda i: (surviving[i], i))
    outcome = defense.DefenseOutcome(removed_index=removed, bm_index=bm,
                                     adjusted_scores=tuple(adjusted), raw_scores=tuple(raw))
    return QueueState(checkpoints=tuple(survivors), bm_index=bm), outcome


class Experiment(ExperimentBase):
    """One seeded experiment run; `run()` returns the JSON-able run log."""

    # -- defense planning (honest and scripted-cheat variants) ---------------

    def _plan_defense(self, role, qs, cp):
        cfg = self.cfg
        candidates = list(qs.checkpoints) + [cp]
        flags = [c.round in self.poisoned_rounds for c in candidates]
        if cfg.defense == "none":
            survivors = candidates[1:]
            queue_state = QueueState(checkpoints=tuple(survivors), bm_index=len(survivors) - 1)
            outcome = defense.DefenseOutcome(0, len(survivors) - 1, (), ())
            return DefensePlan(queue_state, outcome, [])
        if cfg.defense == "gold":
            queue_state, outcome = defense.gold_standard(qs, cp, flags)
            return DefensePlan(queue_state, outcome, [])
        if cfg.defense == "metric-ablation":
            queue_state, outcome = defense.detect_poisoned(qs, cp, self.params, self.scorer)
            return DefensePlan(queue_state, outcome, list(outcome.raw_scores))

        # zksl: quantized pipeline, witnesses retained for the proof
        dcts = [frequency.dct2_quantized(frequency.embed_square(c.update.raw), cfg.frac_bits)
                for c in candidates]
        raw = [frequency.low_freq_taxicab(d.d) for d in dcts]
        cheat = role.cheat if role.malicious else ""
        plan = None
        if cheat == "tamper-dct":
            side = self.side
            idx = frequency.mask_indices(side)
            d2 = dcts[-1].d.copy()
            for uu, vv in idx:
                d2[uu, vv] //= 16
            dcts[-1] = dataclasses.replace(dcts[-1], d=d2)
            raw[-1] = frequency.low_freq_taxicab(d2)
            queue_state, outcome = _prune_with_scores(qs, cp, self.params, raw)
            plan = DefensePlan(queue_state, outcome, raw, dcts=dcts)
        elif cheat == "inflate-scores":
            benign = [i for i in range(len(candidates) - 1) if not flags[i]]
            victim = benign[-1] if benign else 0
            side = self.side
            mask_flat = np.array([u * side + v for u, v in frequency.mask_indices(side)])
            honest_abs = np.abs(dcts[victim].d.reshape(-1)[mask_flat]).astype(np.uint64)
            override = [None] * len(candidates)
            override[victim] = honest_abs * np.uint64(8)
            raw2 = list(raw)
            raw2[victim] = int(np.sum(honest_abs * np.uint64(8), dtype=np.uint64))
            queue_state, outcome = _prune_with_scores(qs, cp, self.params, raw2)
            plan = DefensePlan(queue_state, outcome, raw2, dcts=dcts, abs_override=override)
        elif cheat == "forge-removal":
            _, honest = _prune_with_scores(qs, cp, self.params, raw)
            adjusted = list(honest.adjusted_scores)
            forged_rm = min(range(len(adjusted)), key=lambda i: (adjusted[i], i))
            queue_state, outcome = self._forge_outcome(qs, cp, adjusted, forged_rm, None)
            plan = DefensePlan(queue_state, outcome, raw, dcts=dcts)
        elif cheat == "forge-bm":
            _, honest = _prune_with_scores(qs, cp, self.params, raw)
            rm = honest.removed_index if honest.removed_index != len(raw) - 1 else 0
            queue_state, outcome = self._forge_outcome(qs, cp, list(honest.adjusted_scores),
                                                       rm, len(raw) - 2 if rm != len(raw) - 1 else None)
            plan = DefensePlan(queue_state, outcome, raw, dcts=dcts)
        elif cheat == "skip-defense":
            adjusted = [0] * len(raw)
            survivors = candidates[1:]
            queue_state = QueueState(checkpoints=tuple(survivors), bm_index=len(survivors) - 1)
            outcome = defense.DefenseOutcome(0, len(survivors) - 1, tuple(adjusted), tuple([0] * len(raw)))
            plan = DefensePlan(queue_state, outcome, [0] * len(raw), dcts=dcts)
        elif cheat == "substitute-model":
            queue_state, outcome = _prune_with_scores(qs, cp, self.params, raw)
            sub = 0 if qs.bm_index != 0 else 1
            plan = DefensePlan(queue_state, outcome, raw, dcts=dcts, substitute_index=sub)
        else:
            queue_state, outcome = _prune_with_scores(qs, cp, self.params, raw)
            plan = DefensePlan(queue_state, outcome, raw, dcts=dcts)
        adj = plan.outcome.adjusted_scores
        if adj:
            plan.s_wm = adj[plan.outcome.removed_index] % P
            bm_t = plan.outcome.bm_index
            bm_t = bm_t if bm_t < plan.outcome.removed_index else bm_t + 1
            plan.s_bm = adj[bm_t] % P
        return plan

    def _forge_outcome(self, qs, cp, adjusted, forged_rm, forced_bm):
        candidates = list(qs.checkpoints) + [cp]
        survivors = [c for i, c in enumerate(candidates) if i != forged_rm]
        surviving = [a for i, a in enumerate(adjusted) if i != forged_rm]
        bm = forced_bm if forced_bm is not None else min(
            range(len(surviving)), key=lambda i: (surviving[i], i))
        outcome = defense.DefenseOutcome(forged_rm, bm, tuple(adjusted), ())
        return QueueState(checkpoints=tuple(survivors), bm_index=bm), outcome

    # -- proving --------------------------------------------------------------

    def _prove_round(self, role, rnd, qs, cp, plan, nxt_id):
        cfg = self.cfg
        k = cfg.k
        candidates = list(qs.checkpoints) + [cp]
        models = [c.model for c in candidates]
        updates = [c.update for c in candidates]
        weights = self.params.weights(k + 1)
        base = dict(n=self.n, side=self.side, frac_bits=cfg.frac_bits, k=k,
                    weights=tuple(weights), removed_index=plan.outcome.removed_index,
                    bm_index=plan.outcome.bm_index, src_index=qs.bm_index,
                    s_wm=plan.s_wm, s_bm=plan.s_bm)
        bound_h, bound_s = [], []
        for kind in ("model", "update"):
            for c in qs.checkpoints:
                s, h = self.server.digest_registry[(c.round, kind)]
                bound_h.append(h)
                bound_s.append(s)
        st_srv = zkcircuit.RoundStatement(bound_digests=tuple(bound_h), **base)
        st_cli = zkcircuit.RoundStatement(bound_digests=(), **base)
        bind_b = np.array([c.blindings[0] for c in qs.checkpoints]
                          + [c.blindings[1] for c in qs.checkpoints], dtype=np.uint64)
        seed_srv = _session_seed(cfg.seed, rnd, 0x50)
        seed_cli = _session_seed(cfg.seed, rnd, 0x51)
        reg_srv = K.uniform_mod(seed_srv ^ 0xB11D, 0, 2 * (k + 1))
        reg_cli = K.uniform_mod(seed_cli ^ 0xB11D, 0, 2 * (k + 1))
        wit_srv = zkcircuit.make_round_witness(models, updates, st_srv, bind_b, reg_srv)
        wit_cli = zkcircuit.make_round_witness(models, updates, st_cli,
                                               np.empty(0, dtype=np.uint64), reg_cli)
        for wit in (wit_srv, wit_cli):
            wit.dcts = plan.dcts
            wit.abs_override = plan.abs_override
            if plan.substitute_index >= 0:
                sub = plan.substitute_index
                wit.models[sub] = K.addmod(wit.models[sub], np.uint64(1))

        bound_points = bound_s
        sessions = [("server", SERVER, seed_srv, st_srv, wit_srv, bound_points)]
        if nxt_id != role.cid:
            sessions.append(("client", nxt_id, seed_cli, st_cli, wit_cli, ()))
        results = {}
        threads = []
        t0 = time.time()
        for name, peer, seed, st, wit, bpoints in sessions:
            link_p = ProofLink(self.router.edge(role.cid, peer), rnd, role.cid, peer)
            link_v = ProofLink(self.router.edge(peer, role.cid), rnd, peer, role.cid,
                               audit=self.audit if peer == SERVER else None)
            def vrun(name=name, link_v=link_v, seed=seed, st=st, bpoints=bpoints):
                results[name + "_v"] = zkcircuit.run_verifier_session(
                    link_v, seed, lambda e: zkcircuit.defense_circuit(e, st, None),
                    bound_points=bpoints)
            def prun(name=name, link_p=link_p, seed=seed, st=st, wit=wit):
                results[name + "_p"] = zkcircuit.run_prover_session(
                    link_p, seed, lambda e: zkcircuit.defense_circuit(e, st, wit))
                results[name + "_bytes"] = link_p.bytes_sent + link_p.bytes_received
            threads.append(threading.Thread(target=vrun))
            threads.append(threading.Thread(target=prun))
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=cfg.timeout_s + 30)
        elapsed_ms = (time.time() - t0) * 1000.0
        report = {"ms": elapsed_ms}
        for name, peer, seed, st, wit, _ in sessions:
            ok, tag, veng = results[name + "_v"]
            report[name] = (ok, tag)
            report[name + "_bytes"] = results.get(name + "_bytes", 0)
            if name == "server" and ok:
                fresh = [int(x) for x in veng.revealed[2 * k:]]
                staged = {}
                for i, c in enumerate(candidates):
                    staged[(c.round, "model")] = (fresh[i], int(veng.opened[i][0]))
                    staged[(c.round, "update")] = (fresh[k + 1 + i],
                                                   int(veng.opened[k + 1 + i][0]))
                report["staged_registry"] = staged
            if name == "client" and ok:
                fresh = [int(x) for x in veng.revealed]
                records = []
                for i, c in enumerate(candidates):
                    records.append((c.round, fresh[i], int(veng.opened[i][0]),
                                    fresh[k + 1 + i], int(veng.opened[k + 1 + i][0])))
                report["staged_records"] = (records, (ok, tag))
        report["reg_srv"] = reg_srv
        report["reg_cli"] = reg_cli
        return report

    # -- the round and the loop ----------------------------------------------

    def _evaluate(self):
        best = self.queue_state.best
        backbone = self.server.backbones[best.round]
        ba = trainer.evaluate(best.model, backbone, self.arch, self.test_x, self.test_y,
                              triggered=True, poison=self.poison)
        ma = trainer.evaluate(best.model, backbone, self.arch, self.test_x, self.test_y)
        return ba, ma

    def _run_round(self, rnd, prover_id, nxt_id):
        cfg = self.cfg
        role = self.clients[prover_id]
        qs, _ = self._deliver_queue(self.holder, prover_id, rnd, self.queue_state,
                                    self.last_session_id)
        bundle = self._server_bundle(rnd, prover_id, [c.round for c in qs.checkpoints])
        err = self._check_incoming(role, qs, bundle)
        if err:
            raise AbortRound(self.holder, err, drop=True)
        cp, new_backbone = self._train(role, rnd, qs.best)
        if role.malicious:
            self.poisoned_rounds.add(rnd)
        plan = self._plan_defense(role, qs, cp)
        self._publish(cp)
        report = {"ms": 0.0}
        if cfg.defense == "zksl":
            report = self._prove_round(role, rnd, qs, cp, plan, nxt_id)
            for name in ("server", "client"):
                if name in report:
                    ok, tag = report[name]
                    self.log.append({"event": "proof", "round": rnd, "verifier": name,
                                     "ok": bool(ok), "tag": tag,
                                     "bytes": int(report.get(name + "_bytes", 0)),
                                     "ms": report["ms"]})
            for name in ("server", "client"):
                if name in report and not report[name][0]:
                    raise AbortRound(prover_id, f"proof rejected [{report[name][1]}]",
                                     drop=bool(cfg.drop_on_abort))
            self.server.digest_registry.update(report.get("staged_registry", {}))
            if "staged_records" in report:
                records, verdict = report["staged_records"]
                self.clients[nxt_id].verifier_records = records
                self.clients[nxt_id].verifier_verdict = verdict
        # commit: update blindings from the fresh registrations and advance state
        candidates = list(qs.checkpoints) + [cp]
        if cfg.defense == "zksl":
            reg_srv, reg_cli = report["reg_srv"], report["reg_cli"]
            k = cfg.k
            stamped = []
            for i, c in enumerate(candidates):
                stamped.append(c.with_blindings((int(reg_srv[i]), int(reg_srv[k + 1 + i]),
                                                 int(reg_cli[i]), int(reg_cli[k + 1 + i]))))
            candidates = stamped
        survivors = [c for i, c in enumerate(candidates) if i != plan.outcome.removed_index]
        self.queue_state = QueueState(checkpoints=tuple(survivors),
                                      bm_index=plan.outcome.bm_index)
        self.holder = prover_id
        self.server.backbones[rnd] = new_backbone
        self.server.prune([c.round for c in self.queue_state.checkpoints])
        cand_flags = [c.round in self.poisoned_rounds for c in list(qs.checkpoints) + [cp]]
        queue_flags = [c.round in self.poisoned_rounds for c in survivors]
        self.log.append({
            "event": "round", "round": rnd, "client": prover_id,
            "malicious": role.malicious, "cheat": role.cheat,
            "raw_scores": [int(s) for s in plan.outcome.raw_scores],
            "adjusted_scores": [int(s) for s in plan.outcome.adjusted_scores],
            "removed_index": plan.outcome.removed_index,
            "bm_index": plan.outcome.bm_index,
            "candidate_rounds": [c.round for c in list(qs.checkpoints) + [cp]],
            "candidate_flags": cand_flags,
            "queue_rounds": [c.round for c in survivors],
            "queue_flags": queue_flags,
            "bm_round": self.queue_state.best.round,
            "removed_was_poisoned": cand_flags[plan.outcome.removed_index],
        })

    def run(self):
        cfg = self.cfg
        start = time.time()
        self.queue_state, self.holder = self._init_state()
        self.last_session_id = bytes(16)
        self.log.append({"event": "meta", "config": dataclasses.asdict(cfg),
                         "n": self.n, "side": self.side,
                         "malicious": sorted(c.cid for c in self.clients if c.malicious)})
        rot_pos = 0
        order = [c.cid for c in self.clients]

        def next_active(pos):
            while True:
                cid = order[pos % len(order)]
                pos += 1
                if cid not in self.dropped:
                    return cid, pos

        for rnd in range(1, cfg.rounds + 1):
            if len(self.dropped) >= cfg.clients - 1:
                break
            prover_id, rot_pos = next_active(rot_pos)
            nxt_id, _ = next_active(rot_pos)
            try:
                self._run_round(rnd, prover_id, nxt_id)
            except AbortRound as ab:
                self.log.append({"event": "abort", "round": rnd,
                                 "culprit": ab.culprit, "reason": ab.reason})
                self.server.hash_registry.pop(rnd, None)
                self.server.backbones.pop(rnd, None)
                if ab.drop:
                    self.dropped.add(ab.culprit)
            except ProtocolStateError as exc:
                # liveness: a lost or malformed message times the round out
                self.log.append({"event": "abort", "round": rnd,
                                 "culprit": self.holder, "reason": f"timeout: {exc}"})
                self.server.hash_registry.pop(rnd, None)
                self.server.backbones.pop(rnd, None)
            ba, ma = self._evaluate()
            self.log.append({"event": "eval", "round": rnd, "ba": ba, "ma": ma})
        ba, ma = self._evaluate()
        self.log.append({"event": "final", "ba": ba, "ma": ma,
                         "dropped": sorted(self.dropped),
                         "audit_violations": list(self.audit.violations),
                         "audit_tags": {str(k): v for k, v in self.audit.tag_counts.items()},
                         "wall_s": time.time() - start})
        return self.log


def run_experiment(cfg):
    """Run one seeded experiment; returns the run log (list of JSON-able dicts)."""
    return Experiment(cfg).run()


def run_training_exchange(client_arrays, backbone_state, x, y, lr, timeout=10.0):
    """One split SGD batch over messages; returns (loss, updated backbone).

    ``client_arrays`` = (head W, head b, tail W, tail b); mutated in place
    exactly as the monolithic path would mutate them.
    """
    wh, bh, wt, bt = client_arrays
    d_c, d_s = QueueDuplex.pair(timeout)
    backbones = {0: backbone_state}
    audit = PrivacyAudit(wh.size + bh.size + wt.size + bt.size)
    out = {}
    ts = threading.Thread(target=server_training_loop,
                          args=(d_s, backbones, lr, audit, out))
    ts.start()
    proxy = RemoteBackboneSession(d_c, 1, 0, 0)
    loss = trainer.sgd_batch(wh, bh, wt, bt, proxy, x, y, lr)
    proxy.finish()
    ts.join(timeout=timeout)
    return loss, out["state"], audit
