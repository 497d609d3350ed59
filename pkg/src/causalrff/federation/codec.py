"""Length-prefixed binary frames.

Frame layout: magic ``b"CRFF"``, one type byte, a 4-byte little-endian payload
length, then the payload. Every float is IEEE-754 little-endian, so a decode
of an encode reproduces arrays bit-for-bit.
"""
from __future__ import annotations

import struct

import numpy as np

from .._binary import Reader, Writer
from ..errors import ProtocolError
from ..model import ALL_HEADS, FACTOR_NAMES, GlobalModel, SourceParams
from ..training import GradientRecord, LossBreakdown
from .messages import (AteSummary, DedupMessage, DedupRequest, DedupResult, GradientMessage,
                       Hello, ModelBroadcast, Resync, Shutdown)

MAGIC = b"CRFF"
HEADER = struct.Struct("<4sBI")

T_HELLO = 0
T_DEDUP = 1
T_DEDUP_RESULT = 2
T_BROADCAST = 3
T_GRADIENT = 4
T_ATE = 5
T_RESYNC = 6
T_SHUTDOWN = 7
T_DEDUP_REQUEST = 8

_LOSS_FIELDS = ("J", "J_w", "J_y", "recon_y", "recon_w", "recon_x", "kl", "reg")


def _digests(out: Writer, ds):
    out.u32(len(ds))
    for d in sorted(ds):
        out.raw(d)


def _read_digests(r: Reader):
    return frozenset(r.raw(32) for _ in range(r.u32()))


def encode_payload(msg) -> tuple[int, bytes]:
    out = Writer()
    if isinstance(msg, Hello):
        out.u32(msg.source_id)
        return T_HELLO, out.getvalue()
    if isinstance(msg, DedupRequest):
        return T_DEDUP_REQUEST, b""
    if isinstance(msg, DedupMessage):
        out.u32(msg.source_id)
        _digests(out, msg.digests)
        return T_DEDUP, out.getvalue()
    if isinstance(msg, DedupResult):
        out.u32(msg.source_id)
        _digests(out, msg.excluded)
        return T_DEDUP_RESULT, out.getvalue()
    if isinstance(msg, ModelBroadcast):
        out.u32(msg.round)
        out.blob(msg.model.to_bytes())
        return T_BROADCAST, out.getvalue()
    if isinstance(msg, GradientMessage):
        g = msg.gradient
        out.u32(msg.source_id)
        out.u32(msg.round)
        out.u32(g.n)
        out.u32(msg.losses.source)
        for f in _LOSS_FIELDS:
            out.f64(getattr(msg.losses, f))
        out.u32(len(g.params))
        for p in g.params:
            for a in p.arrays():
                out.array(a)
        for f in FACTOR_NAMES:
            out.array(g.raw(f))
        return T_GRADIENT, out.getvalue()
    if isinstance(msg, AteSummary):
        out.u32(msg.source_id)
        out.f64(msg.ate)
        out.u32(msg.count)
        return T_ATE, out.getvalue()
    if isinstance(msg, Resync):
        out.u32(msg.source_id)
        out.u32(msg.round)
        return T_RESYNC, out.getvalue()
    if isinstance(msg, Shutdown):
        return T_SHUTDOWN, b""
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def decode_payload(kind: int, payload: bytes):
    r = Reader(payload)
    if kind == T_HELLO:
        msg = Hello(r.u32())
    elif kind == T_DEDUP_REQUEST:
        msg = DedupRequest()
    elif kind == T_DEDUP:
        msg = DedupMessage(r.u32(), _read_digests(r))
    elif kind == T_DEDUP_RESULT:
        msg = DedupResult(r.u32(), _read_digests(r))
    elif kind == T_BROADCAST:
        rnd = r.u32()
        msg = ModelBroadcast(rnd, GlobalModel.from_bytes(r.blob()))
    elif kind == T_GRADIENT:
        sid, rnd, n = r.u32(), r.u32(), r.u32()
        lsrc = r.u32()
        losses = LossBreakdown(lsrc, **{f: r.f64() for f in _LOSS_FIELDS})
        m = r.u32()
        params = [SourceParams(*(r.array() for _ in ALL_HEADS)) for _ in range(m)]
        raws = [r.array() for _ in FACTOR_NAMES]
        msg = GradientMessage(sid, rnd, GradientRecord(params, *raws, n=n), losses)
    elif kind == T_ATE:
        msg = AteSummary(r.u32(), r.f64(), r.u32())
    elif kind == T_RESYNC:
        msg = Resync(r.u32(), r.u32())
    elif kind == T_SHUTDOWN:
        msg = Shutdown()
    else:
        raise ProtocolError(f"unknown message type {kind}")
    if not r.done():
        raise ProtocolError(f"trailing bytes in message type {kind}")
    return msg


def encode(msg) -> bytes:
    kind, payload = encode_payload(msg)
    return HEADER.pack(MAGIC, kind, len(payload)) + payload


def decode(frame: bytes):
    """Decode exactly one frame."""
    msg, used = decode_from(frame)
    if used != len(frame):
        raise ProtocolError("trailing bytes after frame")
    return msg


def decode_from(buf: bytes, offset: int = 0):
    """Decode the frame at ``offset``; returns ``(message, next_offset)``."""
    if len(buf) - offset < HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, kind, length = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    start = offset + HEADER.size
    if len(buf) - start < length:
        raise ProtocolError("truncated frame payload")
    return decode_payload(kind, bytes(buf[start:start + length])), start + length


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> bytes:
    head = _recv_exact(sock, HEADER.size)
    magic, _, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    return head + _recv_exact(sock, length)


def send_msg(sock, msg) -> bytes:
    frame = encode(msg)
    sock.sendall(frame)
    return frame


def recv_msg(sock):
    return decode(read_frame(sock))


def frame_type(frame: bytes) -> int:
    return HEADER.unpack_from(frame)[1]


def arrays_equal(a: GradientRecord, b: GradientRecord) -> bool:
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()))
