"""Lockstep exchange of posterior matrices between distributed cohort workers.

Each worker owns one cohort member and talks to every other worker over a
TCP connection (full mesh, no coordinator).  Frames are big-endian::

    magic "DMLP" | u8 version=1 | u8 type | u16 member_id | u64 round
    | u32 rows | u32 cols | payload | u32 crc32(all preceding bytes)

type 1 (handshake): rows = cols = 0, payload = 32-byte config hash + u8
precision flag (1 = 64-bit payloads).  type 2 (probs): rows x cols IEEE-754
values, binary32 unless 64-bit payloads were negotiated.  type 3 (abort):
rows = cols = 0, empty payload.

The handshake is round 0; the n-th probability exchange is round n.
"""

from __future__ import annotations

import socket
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig, config_hash
from .data import Dataset, dataset_from_spec
from .optim import lr_at
from .report import EpochRecord, ExperimentReport, write_report
from .trainer import ModeArgs, _outputs, epoch_batches, evaluate_member, make_members, member_update

__all__ = [
    "ProbMessage",
    "Handshake",
    "Abort",
    "encode",
    "decode",
    "read_frame",
    "LockstepSession",
    "exchange_round",
    "run_distributed_worker",
    "parse_endpoints",
    "TransportError",
    "FrameMagicError",
    "FrameVersionError",
    "FrameLengthError",
    "FrameChecksumError",
    "PayloadError",
    "ProtocolError",
    "RoundMismatchError",
    "HandshakeError",
    "TransportTimeout",
    "SessionAborted",
    "PeerClosedError",
]

MAGIC = b"DMLP"
VERSION = 1
TYPE_HANDSHAKE, TYPE_PROBS, TYPE_ABORT = 1, 2, 3
_HEADER = struct.Struct(">4sBBHQII")
_CRC = struct.Struct(">I")
HASH_LEN = 32
ROW_SUM_TOL = 1e-6


class TransportError(RuntimeError):
    pass


class FrameMagicError(TransportError):
    pass


class FrameVersionError(TransportError):
    pass


class FrameLengthError(TransportError):
    pass


class FrameChecksumError(TransportError):
    pass


class PayloadError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class RoundMismatchError(ProtocolError):
    pass


class HandshakeError(ProtocolError):
    pass


class TransportTimeout(TransportError):
    pass


class SessionAborted(TransportError):
    """A peer sent an abort frame."""


class PeerClosedError(TransportError):
    pass


@dataclass(frozen=True)
class ProbMessage:
    round: int
    member_id: int
    payload: np.ndarray

    @property
    def rows(self) -> int:
        return self.payload.shape[0]

    @property
    def cols(self) -> int:
        return self.payload.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, ProbMessage)
            and (self.round, self.member_id) == (other.round, other.member_id)
            and self.payload.shape == other.payload.shape
            and np.array_equal(self.payload, other.payload)
        )


@dataclass(frozen=True)
class Handshake:
    member_id: int
    config_hash: bytes
    wide: bool
    round: int = 0


@dataclass(frozen=True)
class Abort:
    member_id: int
    round: int


def _validate_rows(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise PayloadError("posterior entries must be finite and lie in [0, 1]")
    if p.size:
        dev = float(np.max(np.abs(p.sum(axis=1) - 1.0)))
        if dev > ROW_SUM_TOL:
            raise PayloadError(f"posterior row sums deviate from 1 by {dev:.3g}")


def encode(msg, wide: bool = False) -> bytes:
    """Serialise a :class:`ProbMessage`, :class:`Handshake` or :class:`Abort`."""
    if isinstance(msg, ProbMessage):
        p = np.asarray(msg.payload)
        if p.ndim != 2:
            raise PayloadError(f"payload must be 2-D, got shape {p.shape}")
        body = np.ascontiguousarray(p, dtype=">f8" if wide else ">f4").tobytes()
        head = _HEADER.pack(MAGIC, VERSION, TYPE_PROBS, msg.member_id, msg.round, p.shape[0], p.shape[1])
    elif isinstance(msg, Handshake):
        if len(msg.config_hash) != HASH_LEN:
            raise ValueError("config hash must be 32 bytes")
        body = bytes(msg.config_hash) + bytes([1 if msg.wide else 0])
        head = _HEADER.pack(MAGIC, VERSION, TYPE_HANDSHAKE, msg.member_id, msg.round, 0, 0)
    elif isinstance(msg, Abort):
        body = b""
        head = _HEADER.pack(MAGIC, VERSION, TYPE_ABORT, msg.member_id, msg.round, 0, 0)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    frame = head + body
    return frame + _CRC.pack(zlib.crc32(frame))


def _payload_len(kind: int, rows: int, cols: int, wide: bool) -> int:
    if kind == TYPE_PROBS:
        return rows * cols * (8 if wide else 4)
    if kind == TYPE_HANDSHAKE:
        return HASH_LEN + 1
    if kind == TYPE_ABORT:
        return 0
    raise ProtocolError(f"unknown frame type {kind}")


def _parse_header(head: bytes, wide: bool) -> tuple[tuple, int]:
    magic, version, kind, member_id, rnd, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameMagicError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise FrameVersionError(f"frame version {version}, expected {VERSION}")
    return (kind, member_id, rnd, rows, cols), _payload_len(kind, rows, cols, wide)


def decode(frame: bytes, wide: bool = False):
    """Parse one complete frame; ``wide`` selects 64-bit probability payloads."""
    frame = bytes(frame)
    if len(frame) < _HEADER.size + _CRC.size:
        raise FrameLengthError(f"frame of {len(frame)} bytes is shorter than header + checksum")
    (kind, member_id, rnd, rows, cols), plen = _parse_header(frame[: _HEADER.size], wide)
    expected = _HEADER.size + plen + _CRC.size
    if len(frame) != expected:
        raise FrameLengthError(f"frame is {len(frame)} bytes, header implies {expected}")
    (crc,) = _CRC.unpack_from(frame, expected - _CRC.size)
    if crc != zlib.crc32(frame[: expected - _CRC.size]):
        raise FrameChecksumError("frame CRC32 mismatch")
    body = frame[_HEADER.size : _HEADER.size + plen]
    if kind == TYPE_PROBS:
        p = np.frombuffer(body, dtype=">f8" if wide else ">f4").astype(np.float64).reshape(rows, cols)
        _validate_rows(p)
        return ProbMessage(rnd, member_id, p)
    if kind == TYPE_HANDSHAKE:
        if rows or cols:
            raise ProtocolError("handshake frames must have rows = cols = 0")
        return Handshake(member_id, body[:HASH_LEN], bool(body[HASH_LEN]), rnd)
    if rows or cols:
        raise ProtocolError("abort frames must have rows = cols = 0")
    return Abort(member_id, rnd)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(n)
        except socket.timeout:
            raise TransportTimeout("timed out waiting for peer data") from None
        except OSError as exc:
            raise PeerClosedError(f"connection failed: {exc}") from None
        if not chunk:
            raise PeerClosedError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, wide: bool = False):
    head = _recv_exact(sock, _HEADER.size)
    _, plen = _parse_header(head, wide)
    rest = _recv_exact(sock, plen + _CRC.size)
    return decode(head + rest, wide)


def parse_endpoints(spec) -> list[tuple[str, int]]:
    """``"h1:p1,h2:p2"`` or a list of ``"host:port"`` strings."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = []
    for item in items:
        host, sep, port = item.strip().rpartition(":")
        if not sep or not port.isdigit():
            raise ConfigError(f"transport.endpoints: {item!r} is not host:port")
        out.append((host or "127.0.0.1", int(port)))
    return out


class LockstepSession:
    """One worker's view of the full-mesh lockstep protocol.

    Member ``i`` listens on ``endpoints[i]``, dials every lower-numbered
    member and accepts connections from higher-numbered ones.
    """

    def __init__(self, member_id: int, endpoints, cfg_hash: bytes, wide: bool = False, timeout: float = 30.0):
        self.endpoints = parse_endpoints(endpoints)
        self.k = len(self.endpoints)
        if not 0 <= member_id < self.k:
            raise ConfigError(f"member id {member_id} out of range for {self.k} endpoints")
        self.member_id = member_id
        self.cfg_hash = cfg_hash
        self.wide = wide
        self.timeout = timeout
        self.round = 0
        self.peers: dict[int, socket.socket] = {}
        self._listener: socket.socket | None = None

    def __enter__(self) -> "LockstepSession":
        self.connect()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()
        self.close()

    def _hello(self) -> bytes:
        return encode(Handshake(self.member_id, self.cfg_hash, self.wide))

    def _check_hello(self, msg, expect_id: int | None) -> int:
        if isinstance(msg, Abort):
            raise SessionAborted(f"member {msg.member_id} aborted during handshake")
        if not isinstance(msg, Handshake):
            raise ProtocolError("expected a handshake frame")
        if expect_id is not None and msg.member_id != expect_id:
            raise HandshakeError(f"expected member {expect_id}, got {msg.member_id}")
        if msg.config_hash != self.cfg_hash:
            raise HandshakeError(f"config hash mismatch with member {msg.member_id}")
        if msg.wide != self.wide:
            raise HandshakeError(f"payload precision mismatch with member {msg.member_id}")
        return msg.member_id

    def connect(self) -> None:
        deadline = time.monotonic() + self.timeout
        host, port = self.endpoints[self.member_id]
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(self.timeout)
        for peer in range(self.member_id):
            sock = self._dial(self.endpoints[peer], deadline)
            sock.sendall(self._hello())
            self._check_hello(read_frame(sock), peer)
            self.peers[peer] = sock
        for _ in range(self.k - 1 - self.member_id):
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                raise TransportTimeout("timed out waiting for peers to connect") from None
            sock.settimeout(self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            msg = read_frame(sock)
            sock.sendall(self._hello())
            self.peers[self._check_hello(msg, None)] = sock

    def _dial(self, endpoint, deadline) -> socket.socket:
        while True:
            try:
                sock = socket.create_connection(endpoint, timeout=max(0.05, deadline - time.monotonic()))
                sock.settimeout(self.timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError:
                if time.monotonic() >= deadline:
                    raise TransportTimeout(f"could not reach peer at {endpoint[0]}:{endpoint[1]}") from None
                time.sleep(0.02)

    def exchange_round(self, local_probs) -> list[np.ndarray]:
        """Send this round's posteriors to all peers and collect theirs.

        Returns the K-1 peer matrices ordered by member id.
        """
        rnd = self.round + 1
        local = np.asarray(local_probs, dtype=np.float64)
        frame = encode(ProbMessage(rnd, self.member_id, local), self.wide)
        for pid, sock in self.peers.items():
            try:
                sock.sendall(frame)
            except socket.timeout:
                raise TransportTimeout("timed out sending to peer") from None
            except OSError as exc:
                self._raise_pending_abort(pid)
                raise PeerClosedError(f"send failed: {exc}") from None
        received = []
        for pid in sorted(self.peers):
            msg = read_frame(self.peers[pid], self.wide)
            if isinstance(msg, Abort):
                raise SessionAborted(f"member {msg.member_id} aborted at round {msg.round}")
            if not isinstance(msg, ProbMessage):
                raise ProtocolError(f"unexpected {type(msg).__name__} frame from member {pid}")
            if msg.member_id != pid:
                raise ProtocolError(f"frame claims member {msg.member_id} on member {pid}'s connection")
            if msg.round != rnd:
                raise RoundMismatchError(f"member {pid} sent round {msg.round}, expected {rnd}")
            if msg.payload.shape != local.shape:
                raise ProtocolError(f"member {pid} sent shape {msg.payload.shape}, expected {local.shape}")
            received.append(msg.payload)
        self.round = rnd
        return received

    def _raise_pending_abort(self, pid: int) -> None:
        # a peer that gave up usually left an abort frame before closing
        sock = self.peers[pid]
        try:
            sock.settimeout(0.2)
            msg = read_frame(sock, self.wide)
        except TransportError:
            return
        if isinstance(msg, Abort):
            raise SessionAborted(f"member {msg.member_id} aborted at round {msg.round}")

    def abort(self) -> None:
        frame = encode(Abort(self.member_id, self.round))
        for sock in self.peers.values():
            try:
                sock.settimeout(0.5)
                sock.sendall(frame)
            except OSError:
                pass

    def close(self) -> None:
        for sock in self.peers.values():
            try:
                sock.close()
            except OSError:
                pass
        self.peers.clear()
        if self._listener is not None:
            self._listener.close()
            self._listener = None


def exchange_round(session: LockstepSession, local_probs) -> list[np.ndarray]:
    return session.exchange_round(local_probs)


DISTRIBUTED_VARIANT = "simultaneous (distributed)"


def run_distributed_worker(
    config: ExperimentConfig,
    member_id: int,
    endpoints=None,
    dataset: Dataset | None = None,
    out_dir=None,
    stop_after: int | None = None,
) -> ExperimentReport:
    """Train cohort member ``member_id`` against peers running elsewhere.

    Every mini-batch: local forward, lockstep exchange of posteriors, local
    mutual-learning objective against the received peers, local update.
    On failure a partial report is written to ``out_dir`` before the error
    propagates.  ``stop_after`` halts after that many steps (fault drills).
    """
    config.validate()
    if config.mode != "dml":
        raise ConfigError(f"mode: distributed workers run mode 'dml', got {config.mode!r}")
    if config.variant != "simultaneous":
        raise ConfigError("variant: distributed workers need the 'simultaneous' variant")
    endpoints = endpoints or list(config.transport.endpoints)
    if len(parse_endpoints(endpoints)) != config.k:
        raise ConfigError(f"transport.endpoints: need {config.k} endpoints, got {len(parse_endpoints(endpoints))}")
    if dataset is None:
        dataset = dataset_from_spec(config.dataset.kind, config.dataset.params)
    start = time.perf_counter()
    member = make_members(config, dataset.input_dim, dataset.num_classes)[member_id]
    args = ModeArgs(reduction=config.reduction, aggregation=config.aggregation)
    report = ExperimentReport(config=config.to_dict(), variant=DISTRIBUTED_VARIANT)

    def record(epoch):
        report.rows.append(EpochRecord(epoch=epoch, member=member_id, **evaluate_member(member.params, dataset)))

    steps = 0
    try:
        with LockstepSession(member_id, endpoints, config_hash(config), config.transport.wide, config.transport.timeout) as session:
            record(0)
            n = len(dataset.train_y)
            for epoch in range(config.epochs):
                member.opt.lr = lr_at(config.schedule, config.optimizer.lr, epoch)
                for idx in epoch_batches(n, config.batch_size, config.data_seed, epoch):
                    if stop_after is not None and steps >= stop_after:
                        return report
                    x, y = dataset.train_x[idx], dataset.train_y[idx]
                    _, local = _outputs(member.params, x)
                    peers = iter(session.exchange_round(local))
                    peer_probs = [None if i == member_id else next(peers) for i in range(config.k)]
                    member_update(member, x, y, "dml", member_id, peer_probs, None, args)
                    steps += 1
                record(epoch + 1)
    except Exception:
        report.tables["abort"] = [{"member": member_id, "steps_completed": steps}]
        raise
    finally:
        report.wall_clock = time.perf_counter() - start
        report.params = [member.params]
        if out_dir is not None:
            write_report(report, out_dir)
    return report

