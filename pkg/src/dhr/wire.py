"""Datagram formats and visibility-frame chunking/reassembly.

Every datagram is::

    magic u32 | version u8 | msg_type u8 | session_id u32 | frame_id u32
    | body ... | crc32 u32

little-endian, no padding; the CRC (zlib polynomial) covers header and body.
See docs/wire_protocol.md for the byte-level layout of each body.
"""
from __future__ import annotations

import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

MAGIC = 0x31524844  # b"DHR1" on the wire
VERSION = 1

MSG_HELLO = 1
MSG_HELLO_ACK = 2
MSG_FRAME_INPUT = 3
MSG_VISIBILITY_CHUNK = 4

STATUS_OK = 0
STATUS_SCENE_MISMATCH = 1
STATUS_BAD_PARAMS = 2

DEFAULT_MAX_PAYLOAD = 1200
MIN_MAX_PAYLOAD = 64
MAX_UDP_DATAGRAM = 65507
MAX_INFLIGHT_FRAMES = 8

_HEADER = struct.Struct("<IBBII")
_CRC = struct.Struct("<I")
_HELLO = struct.Struct("<HHBQH")
_HELLO_ACK = struct.Struct("<HHBQHB")
_FRAME_INPUT = struct.Struct("<Q3f4ff")
_CHUNK = struct.Struct("<HHIIH")

HEADER_SIZE = _HEADER.size
OVERHEAD = HEADER_SIZE + _CRC.size
CHUNK_OVERHEAD = OVERHEAD + _CHUNK.size

QUAT_TOL = 1e-3


class WireError(ValueError):
    """Base class of datagram decoding/encoding failures."""


class ShortDatagram(WireError):
    pass


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class CrcMismatch(WireError):
    pass


class LengthMismatch(WireError):
    pass


class InvalidField(WireError):
    pass


class DatagramTooLarge(WireError):
    pass


@dataclass(frozen=True)
class Hello:
    session_id: int
    width: int
    height: int
    n_lights: int
    scene_hash: int
    max_payload: int = DEFAULT_MAX_PAYLOAD
    frame_id: int = 0
    msg_type = MSG_HELLO


@dataclass(frozen=True)
class HelloAck:
    """Echo of the Hello fields plus a status byte (0 accepted, else aborted)."""

    session_id: int
    width: int
    height: int
    n_lights: int
    scene_hash: int
    max_payload: int
    status: int = STATUS_OK
    frame_id: int = 0
    msg_type = MSG_HELLO_ACK


@dataclass(frozen=True)
class FrameInputMsg:
    session_id: int
    frame_id: int
    timestamp_us: int
    cam_pos: tuple
    cam_quat: tuple  # (x, y, z, w)
    vfov_deg: float
    msg_type = MSG_FRAME_INPUT


@dataclass(frozen=True)
class VisibilityChunk:
    session_id: int
    frame_id: int
    chunk_index: int
    chunk_count: int
    uncompressed_size: int
    compressed_size: int
    payload: bytes
    msg_type = MSG_VISIBILITY_CHUNK

    @property
    def payload_len(self):
        return len(self.payload)


def _body(msg):
    if isinstance(msg, Hello):
        return _HELLO.pack(msg.width, msg.height, msg.n_lights, msg.scene_hash, msg.max_payload)
    if isinstance(msg, HelloAck):
        return _HELLO_ACK.pack(msg.width, msg.height, msg.n_lights, msg.scene_hash, msg.max_payload, msg.status)
    if isinstance(msg, FrameInputMsg):
        return _FRAME_INPUT.pack(msg.timestamp_us, *msg.cam_pos, *msg.cam_quat, msg.vfov_deg)
    if isinstance(msg, VisibilityChunk):
        if not 0 <= msg.chunk_index < msg.chunk_count:
            raise InvalidField("chunk_index must be < chunk_count")
        return (
            _CHUNK.pack(
                msg.chunk_index, msg.chunk_count, msg.uncompressed_size, msg.compressed_size, len(msg.payload)
            )
            + msg.payload
        )
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode(msg, max_datagram=MAX_UDP_DATAGRAM):
    try:
        head = _HEADER.pack(MAGIC, VERSION, msg.msg_type, msg.session_id, msg.frame_id)
        body = _body(msg)
    except struct.error as e:
        raise InvalidField(str(e)) from None
    data = head + body
    if len(data) + _CRC.size > max_datagram:
        raise DatagramTooLarge(f"datagram of {len(data) + _CRC.size} bytes exceeds {max_datagram}")
    return data + _CRC.pack(zlib.crc32(data))


def _expect(body, st):
    if len(body) != st.size:
        raise LengthMismatch(f"body is {len(body)} bytes, expected {st.size}")
    return st.unpack(body)


def decode(data):
    """Parse and validate one datagram; raises a :class:`WireError` subclass."""
    data = bytes(data)
    if len(data) < OVERHEAD:
        raise ShortDatagram(f"short datagram ({len(data)} bytes)")
    magic, version, msg_type, session_id, frame_id = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if not MSG_HELLO <= msg_type <= MSG_VISIBILITY_CHUNK:
        raise UnknownMessageType(f"unknown msg_type {msg_type}")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: -_CRC.size]) != crc:
        raise CrcMismatch("crc mismatch")
    body = data[HEADER_SIZE : -_CRC.size]

    if msg_type == MSG_HELLO:
        w, h, nl, sh, mp = _expect(body, _HELLO)
        return Hello(session_id, w, h, nl, sh, mp, frame_id)
    if msg_type == MSG_HELLO_ACK:
        w, h, nl, sh, mp, st = _expect(body, _HELLO_ACK)
        return HelloAck(session_id, w, h, nl, sh, mp, st, frame_id)
    if msg_type == MSG_FRAME_INPUT:
        ts, px, py, pz, qx, qy, qz, qw, vfov = _expect(body, _FRAME_INPUT)
        vals = (px, py, pz, qx, qy, qz, qw, vfov)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidField("non-finite camera field")
        if abs(math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw) - 1.0) > QUAT_TOL:
            raise InvalidField("camera quaternion not unit")
        if not 0.0 < vfov < 180.0:
            raise InvalidField("vfov out of range")
        return FrameInputMsg(session_id, frame_id, ts, (px, py, pz), (qx, qy, qz, qw), vfov)

    if len(body) < _CHUNK.size:
        raise LengthMismatch("chunk header truncated")
    idx, count, usize, csize, plen = _CHUNK.unpack_from(body)
    payload = body[_CHUNK.size :]
    if len(payload) != plen:
        raise LengthMismatch(f"payload_len {plen} but {len(payload)} bytes present")
    if idx >= count:
        raise InvalidField("chunk_index >= chunk_count")
    if plen > csize:
        raise LengthMismatch("payload larger than compressed_size")
    return VisibilityChunk(session_id, frame_id, idx, count, usize, csize, payload)


def split_visibility(frame_id, compressed, uncompressed_size, max_payload=DEFAULT_MAX_PAYLOAD, session_id=0):
    """Cut a compressed bitmap into chunk messages of at most ``max_payload`` bytes."""
    if max_payload < MIN_MAX_PAYLOAD:
        raise ValueError(f"max_payload must be >= {MIN_MAX_PAYLOAD}")
    compressed = bytes(compressed)
    count = max(1, -(-len(compressed) // max_payload))
    if count > 0xFFFF:
        raise ValueError("payload needs more than 65535 chunks")
    return [
        VisibilityChunk(
            session_id,
            frame_id,
            i,
            count,
            uncompressed_size,
            len(compressed),
            compressed[i * max_payload : (i + 1) * max_payload],
        )
        for i in range(count)
    ]


class _Pending:
    __slots__ = ("chunk_count", "compressed_size", "uncompressed_size", "pieces")

    def __init__(self, chunk):
        self.chunk_count = chunk.chunk_count
        self.compressed_size = chunk.compressed_size
        self.uncompressed_size = chunk.uncompressed_size
        self.pieces = {}


class Reassembler:
    """Collects chunks per frame and hands out each complete frame once.

    Frames at or below the newest completed frame are dropped, as are frames
    with inconsistent chunk metadata.  At most ``max_inflight`` incomplete
    frames are buffered; the oldest is evicted first.
    """

    def __init__(self, max_inflight=MAX_INFLIGHT_FRAMES):
        self.max_inflight = max_inflight
        self.pending = OrderedDict()
        self.newest_completed = -1
        self.poisoned = set()
        self.last_uncompressed_size = None
        self.stats = {"duplicates": 0, "stale": 0, "evicted": 0, "inconsistent": 0, "completed": 0}

    def feed(self, chunk):
        """Returns ``(frame_id, compressed_bytes)`` when ``chunk`` completes a frame."""
        f = chunk.frame_id
        if f <= self.newest_completed:
            self.stats["stale"] += 1
            return None
        if f in self.poisoned:
            self.stats["inconsistent"] += 1
            return None
        p = self.pending.get(f)
        if p is None:
            p = self.pending[f] = _Pending(chunk)
            self._evict()
            if f not in self.pending:
                return None
        elif (
            p.chunk_count != chunk.chunk_count
            or p.compressed_size != chunk.compressed_size
            or p.uncompressed_size != chunk.uncompressed_size
        ):
            self._poison(f)
            return None
        if chunk.chunk_index in p.pieces:
            self.stats["duplicates"] += 1
            return None
        p.pieces[chunk.chunk_index] = chunk.payload
        if len(p.pieces) < p.chunk_count:
            return None
        data = b"".join(p.pieces[i] for i in range(p.chunk_count))
        if len(data) != p.compressed_size:
            self._poison(f)
            return None
        del self.pending[f]
        self.newest_completed = f
        self.last_uncompressed_size = p.uncompressed_size
        for old in [k for k in self.pending if k < f]:
            del self.pending[old]
        self.poisoned = {k for k in self.poisoned if k > f}
        self.stats["completed"] += 1
        return f, data

    def _poison(self, f):
        self.pending.pop(f, None)
        self.poisoned.add(f)
        self.stats["inconsistent"] += 1

    def _evict(self):
        while len(self.pending) > self.max_inflight:
            oldest = min(self.pending)
            del self.pending[oldest]
            self.stats["evicted"] += 1
