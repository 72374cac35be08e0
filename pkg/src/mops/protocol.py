"""E-interface / G-interface wire format and a loopback transport.

Frame layout (all integers little-endian)::

    magic "MOPS" | version u8 | msg_type u8 | agent_id u16 | round u32 | payload_len u32 | payload

Every payload starts with a u8 sample tag.  Real vectors are a u32 element
count followed by IEEE-754 binary64 values.

=========  ==============================================================
EMB  0x01  tag u8 | sample_index u32 | z vector | y vector
GRAD 0x02  tag u8 | g_boundary vector
WEIGHTS    tag u8 | weights vector
CONTROL    tag u8 (control code) | u32 length | opaque body bytes
=========  ==============================================================
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ChannelClosed, InvalidArgument, NumericFailure, ProtocolError

MAGIC = b"MOPS"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
HEADER_LEN = HEADER.size  # 16
BROADCAST = 0xFFFF
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_MAX_LEN = 2**32 - 1


class MsgType(IntEnum):
    EMB = 0x01
    GRAD = 0x02
    WEIGHTS = 0x03
    CONTROL = 0x04


class SampleTag(IntEnum):
    PRIMARY = 0
    EXTRA1 = 1
    EXTRA2 = 2


class ControlCode(IntEnum):
    ASSIGN = 1
    ROUND_BARRIER = 2
    INNER_PRODUCT = 3
    SHUTDOWN = 4


def _vec_eq(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _as_f64(v) -> np.ndarray:
    return np.ascontiguousarray(v, dtype=np.float64).reshape(-1)


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    agent_id: int
    round: int
    sample_tag: SampleTag
    z: np.ndarray
    y: np.ndarray
    sample_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "z", _as_f64(self.z))
        object.__setattr__(self, "y", _as_f64(self.y))
        object.__setattr__(self, "sample_tag", SampleTag(self.sample_tag))

    def __eq__(self, other):
        return (isinstance(other, EmbeddingRecord)
                and (self.agent_id, self.round, self.sample_tag, self.sample_index)
                == (other.agent_id, other.round, other.sample_tag, other.sample_index)
                and _vec_eq(self.z, other.z) and _vec_eq(self.y, other.y))


@dataclass(frozen=True, eq=False)
class GradientRecord:
    agent_id: int
    round: int
    g_boundary: np.ndarray
    sample_tag: SampleTag = SampleTag.PRIMARY

    def __post_init__(self):
        object.__setattr__(self, "g_boundary", _as_f64(self.g_boundary))
        object.__setattr__(self, "sample_tag", SampleTag(self.sample_tag))

    def __eq__(self, other):
        return (isinstance(other, GradientRecord)
                and (self.agent_id, self.round, self.sample_tag)
                == (other.agent_id, other.round, other.sample_tag)
                and _vec_eq(self.g_boundary, other.g_boundary))


@dataclass(frozen=True, eq=False)
class WeightsRecord:
    round: int
    weights: np.ndarray
    agent_id: int = BROADCAST

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_f64(self.weights))

    def __eq__(self, other):
        return (isinstance(other, WeightsRecord)
                and (self.agent_id, self.round) == (other.agent_id, other.round)
                and _vec_eq(self.weights, other.weights))


@dataclass(frozen=True)
class ControlRecord:
    agent_id: int
    round: int
    code: ControlCode
    body: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "code", ControlCode(self.code))


Record = EmbeddingRecord | GradientRecord | WeightsRecord | ControlRecord


@dataclass(frozen=True)
class Header:
    magic: bytes
    version: int
    msg_type: MsgType
    agent_id: int
    round: int
    payload_len: int


def _pack_vec(v: np.ndarray) -> bytes:
    if v.size > _MAX_LEN:
        raise InvalidArgument("vector too long for a u32 length prefix")
    if not np.all(np.isfinite(v)):
        raise NumericFailure("refusing to encode non-finite reals")
    return _U32.pack(v.size) + v.astype("<f8").tobytes()


def _check_u(value: int, bits: int, name: str) -> None:
    if not 0 <= value < (1 << bits):
        raise InvalidArgument(f"{name}={value} does not fit in u{bits}")


def encode(record: Record) -> bytes:
    if isinstance(record, EmbeddingRecord):
        msg_type = MsgType.EMB
        _check_u(record.sample_index, 32, "sample_index")
        payload = (_U8.pack(record.sample_tag) + _U32.pack(record.sample_index)
                   + _pack_vec(record.z) + _pack_vec(record.y))
    elif isinstance(record, GradientRecord):
        msg_type = MsgType.GRAD
        payload = _U8.pack(record.sample_tag) + _pack_vec(record.g_boundary)
    elif isinstance(record, WeightsRecord):
        msg_type = MsgType.WEIGHTS
        payload = _U8.pack(0) + _pack_vec(record.weights)
    elif isinstance(record, ControlRecord):
        msg_type = MsgType.CONTROL
        if len(record.body) > _MAX_LEN:
            raise InvalidArgument("control body too long")
        payload = _U8.pack(record.code) + _U32.pack(len(record.body)) + record.body
    else:
        raise InvalidArgument(f"cannot encode {type(record).__name__}")
    _check_u(record.agent_id, 16, "agent_id")
    _check_u(record.round, 32, "round")
    if len(payload) > _MAX_LEN:
        raise InvalidArgument("payload too long")
    return HEADER.pack(MAGIC, VERSION, msg_type, record.agent_id, record.round,
                       len(payload)) + payload


def decode_header(data: bytes) -> Header:
    if len(data) < HEADER_LEN:
        raise ProtocolError(f"truncated header: {len(data)} < {HEADER_LEN} bytes")
    magic, version, msg_type, agent_id, rnd, payload_len = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError as exc:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}") from exc
    return Header(magic, version, msg_type, agent_id, rnd, payload_len)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("payload shorter than its contents declare")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def vec(self) -> np.ndarray:
        n = self.u32()
        v = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericFailure("payload contains non-finite reals")
        return v

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing payload bytes")


def decode(data: bytes) -> Record:
    head = decode_header(data)
    if len(data) - HEADER_LEN != head.payload_len:
        raise ProtocolError(
            f"payload_len {head.payload_len} but {len(data) - HEADER_LEN} bytes follow the header")
    r = _Reader(bytes(data[HEADER_LEN:]))
    tag = r.u8()
    try:
        if head.msg_type == MsgType.EMB:
            index = r.u32()
            z = r.vec()
            y = r.vec()
            rec = EmbeddingRecord(head.agent_id, head.round, SampleTag(tag), z, y, index)
        elif head.msg_type == MsgType.GRAD:
            rec = GradientRecord(head.agent_id, head.round, r.vec(), SampleTag(tag))
        elif head.msg_type == MsgType.WEIGHTS:
            rec = WeightsRecord(head.round, r.vec(), head.agent_id)
        else:
            body = r.take(r.u32())
            rec = ControlRecord(head.agent_id, head.round, ControlCode(tag), body)
    except ValueError as exc:
        if isinstance(exc, (ProtocolError, NumericFailure)):
            raise
        raise ProtocolError(f"bad tag byte {tag}") from exc
    r.done()
    return rec


def emb_message_bytes(embed_dim: int, label_dim: int) -> int:
    return HEADER_LEN + 1 + 4 + (4 + 8 * embed_dim) + (4 + 8 * label_dim)


def grad_message_bytes(embed_dim: int) -> int:
    return HEADER_LEN + 1 + 4 + 8 * embed_dim


def round_bytes(n_agents: int, embed_dim: int, label_dim: int, dynamic: bool) -> int:
    """Data-plane bytes of one coordination round (uploads plus gradient downloads)."""
    uploads = (3 if dynamic else 1) * emb_message_bytes(embed_dim, label_dim)
    return n_agents * (uploads + grad_message_bytes(embed_dim))


# -- transport -----------------------------------------------------------------

_CLOSED = object()


class LoopbackTransport:
    """Reliable in-order in-process delivery, one FIFO per (sender, receiver) pair.

    ``recv`` blocks until a message from the named sender arrives.  Closing an
    endpoint wakes its blocked receivers with :class:`ChannelClosed`.
    """

    def __init__(self):
        self._queues: dict[tuple[str, str], queue.SimpleQueue] = {}
        self._endpoints: set[str] = set()
        self._closed: set[str] = set()
        self._lock = threading.Lock()
        self.bytes_sent: dict[tuple[str, str], int] = {}

    def register(self, name: str) -> "Endpoint":
        with self._lock:
            self._endpoints.add(name)
        return Endpoint(self, name)

    def _queue(self, src: str, dst: str) -> queue.SimpleQueue:
        with self._lock:
            if src not in self._endpoints or dst not in self._endpoints:
                raise InvalidArgument(f"unregistered endpoint in {src!r} -> {dst!r}")
            q = self._queues.get((src, dst))
            if q is None:
                q = self._queues[(src, dst)] = queue.SimpleQueue()
            return q

    def send(self, src: str, dst: str, data: bytes) -> None:
        if dst in self._closed or src in self._closed:
            raise ChannelClosed(f"channel {src!r} -> {dst!r} is closed")
        q = self._queue(src, dst)
        with self._lock:
            self.bytes_sent[(src, dst)] = self.bytes_sent.get((src, dst), 0) + len(data)
        q.put(bytes(data))

    def recv(self, dst: str, src: str, timeout: float | None = None) -> bytes:
        if dst in self._closed:
            raise ChannelClosed(f"endpoint {dst!r} is closed")
        try:
            item = self._queue(src, dst).get(timeout=timeout)
        except queue.Empty as exc:
            raise TimeoutError(f"no message from {src!r} within {timeout}s") from exc
        if item is _CLOSED:
            raise ChannelClosed(f"endpoint {dst!r} is closed")
        return item

    def close(self, name: str) -> None:
        with self._lock:
            self._closed.add(name)
            waiting = [q for (s, d), q in self._queues.items() if d == name]
        for q in waiting:
            q.put(_CLOSED)

    def total_bytes(self) -> int:
        with self._lock:
            return sum(self.bytes_sent.values())


@dataclass(frozen=True)
class Endpoint:
    transport: LoopbackTransport
    name: str

    def send(self, dst: str, data: bytes) -> None:
        self.transport.send(self.name, dst, data)

    def recv(self, src: str, timeout: float | None = None) -> bytes:
        return self.transport.recv(self.name, src, timeout)

    def send_record(self, dst: str, record: Record) -> int:
        data = encode(record)
        self.send(dst, data)
        return len(data)

    def recv_record(self, src: str, timeout: float | None = None) -> Record:
        return decode(self.recv(src, timeout))
