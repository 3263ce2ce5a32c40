"""Length-prefixed binary frames for proof sessions, plus channels and transcripts.

Frame layout: 4-byte big-endian payload length, 16-byte session id, 1-byte
message type, payload. The same framing runs over in-process queues and over
TCP sockets.
"""

from __future__ import annotations

import queue
import socket
import struct
from dataclasses import dataclass

from .errors import ProtocolStateError

COMMIT_BATCH = 1
CHALLENGE_R = 2
CHALLENGE_BATCH = 3
OPEN_BATCH = 4
ASSERT_RESULT = 5
ABORT = 6

TYPE_NAMES = {
    COMMIT_BATCH: "COMMIT_BATCH",
    CHALLENGE_R: "CHALLENGE_R",
    CHALLENGE_BATCH: "CHALLENGE_BATCH",
    OPEN_BATCH: "OPEN_BATCH",
    ASSERT_RESULT: "ASSERT_RESULT",
    ABORT: "ABORT",
}


def pack_frame(session_id, ftype, payload):
    if len(session_id) != 16:
        raise ValueError("session id must be 16 bytes")
    body = session_id + bytes([ftype]) + payload
    return struct.pack(">I", len(body)) + body


def unpack_frame(data):
    sid = data[:16]
    ftype = data[16]
    return sid, ftype, data[17:]


@dataclass
class Frame:
    direction: str  # "p2v" or "v2p"
    session_id: bytes
    ftype: int
    payload: bytes


class QueueChannel:
    """One endpoint of an in-process ordered duplex channel."""

    def __init__(self, inbox, outbox, timeout=30.0):
        self._inbox = inbox
        self._outbox = outbox
        self.timeout = timeout
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def pair(cls, timeout=30.0):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send(self, session_id, ftype, payload):
        raw = pack_frame(session_id, ftype, payload)
        self.bytes_sent += len(raw)
        self._outbox.put(raw)

    def recv(self):
        try:
            raw = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolStateError("channel receive timed out") from None
        self.bytes_received += len(raw)
        return unpack_frame(raw[4:])


class SocketChannel:
    """The same framing over a connected TCP socket."""

    def __init__(self, sock, timeout=30.0):
        self._sock = sock
        self._sock.settimeout(timeout)
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, session_id, ftype, payload):
        raw = pack_frame(session_id, ftype, payload)
        self.bytes_sent += len(raw)
        self._sock.sendall(raw)

    def _read_exact(self, count):
        buf = bytearray()
        while len(buf) < count:
            try:
                chunk = self._sock.recv(count - len(buf))
            except socket.timeout:
                raise ProtocolStateError("socket receive timed out") from None
            if not chunk:
                raise ProtocolStateError("socket closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    def recv(self):
        header = self._read_exact(4)
        (length,) = struct.unpack(">I", header)
        body = self._read_exact(length)
        self.bytes_received += 4 + length
        return unpack_frame(body)


class RecordingChannel:
    """Wraps a channel and captures every frame for transcripts/audits."""

    def __init__(self, inner, log=None):
        self.inner = inner
        self.log = log if log is not None else []

    @property
    def bytes_sent(self):
        return self.inner.bytes_sent

    @property
    def bytes_received(self):
        return self.inner.bytes_received

    def send(self, session_id, ftype, payload):
        self.log.append(Frame("sent", session_id, ftype, payload))
        self.inner.send(session_id, ftype, payload)

    def recv(self):
        sid, ftype, payload = self.inner.recv()
        self.log.append(Frame("received", sid, ftype, payload))
        return sid, ftype, payload


TRANSCRIPT_MAGIC = b"ZKTR"


def dump_transcript(frames, path):
    """Write a frame log to disk for later replay."""
    with open(path, "wb") as fh:
        fh.write(TRANSCRIPT_MAGIC + bytes([1]))
        for fr in frames:
            fh.write(bytes([0 if fr.direction == "sent" else 1]))
            fh.write(pack_frame(fr.session_id, fr.ftype, fr.payload))


def load_transcript(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TRANSCRIPT_MAGIC:
        raise ValueError("not a transcript file")
    frames = []
    pos = 5
    while pos < len(data):
        direction = "sent" if data[pos] == 0 else "received"
        pos += 1
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        pos += 4
        sid, ftype, payload = unpack_frame(data[pos:pos + length])
        pos += length
        frames.append(Frame(direction, sid, ftype, payload))
    return frames


# Prover-perspective state machine: which frame types may follow each phase.
_REPLAY_FLOW = {
    "commit": {COMMIT_BATCH: "commit", CHALLENGE_R: "challenged", ABORT: "done"},
    "challenged": {OPEN_BATCH: "opened", ABORT: "done"},
    "opened": {OPEN_BATCH: "opened", CHALLENGE_BATCH: "responding", ABORT: "done"},
    "responding": {OPEN_BATCH: "responded", ABORT: "done"},
    "responded": {ASSERT_RESULT: "done", ABORT: "done"},
}

_EXPECTED_DIRECTION = {
    COMMIT_BATCH: "sent",
    CHALLENGE_R: "received",
    CHALLENGE_BATCH: "received",
    OPEN_BATCH: "sent",
    ASSERT_RESULT: "received",
}


def replay_transcript(frames):
    """Structural replay of a prover-side frame log.

    Checks the session id is constant, directions match the protocol roles,
    and the frame-type sequence follows the session state machine. Returns
    (ok, detail).
    """
    if not frames:
        return False, "empty transcript"
    sid = frames[0].session_id
    state = "commit"
    for i, fr in enumerate(frames):
        if fr.session_id != sid:
            return False, f"frame {i}: session id changed"
        if fr.ftype not in TYPE_NAMES:
            return False, f"frame {i}: unknown type {fr.ftype}"
        if fr.ftype != ABORT and fr.direction != _EXPECTED_DIRECTION[fr.ftype]:
            return False, f"frame {i}: {TYPE_NAMES[fr.ftype]} in wrong direction"
        allowed = _REPLAY_FLOW.get(state, {})
        if fr.ftype not in allowed:
            return False, f"frame {i}: {TYPE_NAMES[fr.ftype]} not allowed in state {state}"
        state = allowed[fr.ftype]
    if state != "done":
        return False, f"transcript ends in state {state}"
    return True, "ok"
