"""LBWP wire framing: one binary codec shared by every transport.

Frame layout (little-endian): magic 'LBWP', version u8, type u8, payload
length u32, payload. Types: 0 ACTION, 1 FRAME, 2 PROMPT, 3 RESET,
4 STATS_REQ, 5 STATS, 6 ERROR. Payloads:

  ACTION  key bitmask u8 (bit0 W, bit1 A, bit2 S, bit3 D; bits 4-7
          reserved zero), yaw_delta f32, pitch_delta f32, timestamp f64
  FRAME   chunk u32, frame-in-chunk u8, height u16, width u16, raw RGB
  PROMPT  utf-8 text
  STATS   utf-8 JSON object (sorted keys on encode)
  ERROR   utf-8 JSON {code, detail}
  RESET / STATS_REQ  empty

Decoding is incremental: a truncated frame is "need more bytes", never an
error. Malformed frames whose length field still parses (unknown type,
reserved bits, bad payload) are consumed whole so the stream stays in
sync; magic, version and length-cap violations lose framing and poison
the stream. Each failure mode carries a distinct error code.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

MAGIC = b"LBWP"
VERSION = 1
MAX_PAYLOAD = 16 * 2**20

MSG_ACTION = 0
MSG_FRAME = 1
MSG_PROMPT = 2
MSG_RESET = 3
MSG_STATS_REQ = 4
MSG_STATS = 5
MSG_ERROR = 6

_HEADER = struct.Struct("<4sBBI")
_ACTION = struct.Struct("<Bffd")
_FRAME_HEAD = struct.Struct("<IBHH")
_F32 = struct.Struct("<f")

KEY_BITS = {"W": 1, "A": 2, "S": 4, "D": 8}


class ProtocolError(Exception):
    """Base wire error. `consumed` bytes were already skipped to resync;
    zero means framing is lost and the stream cannot continue."""

    code = "protocol"

    def __init__(self, detail: str = "", consumed: int = 0):
        super().__init__(detail or self.code)
        self.detail = detail
        self.consumed = consumed


class BadMagicError(ProtocolError):
    code = "bad_magic"


class BadVersionError(ProtocolError):
    code = "bad_version"


class LengthOverflowError(ProtocolError):
    code = "length_overflow"


class ReservedBitsError(ProtocolError):
    code = "reserved_bits"


class UnknownTypeError(ProtocolError):
    code = "unknown_type"


class MalformedPayloadError(ProtocolError):
    code = "malformed_payload"


def _f32(v: float) -> float:
    return _F32.unpack(_F32.pack(v))[0]


@dataclass(frozen=True)
class Action:
    """Stored at wire precision so encode/decode round-trips compare equal."""

    keys: frozenset = frozenset()
    yaw_delta: float = 0.0
    pitch_delta: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        bad = set(self.keys) - set(KEY_BITS)
        if bad:
            raise ValueError(f"unknown keys {sorted(bad)}")
        object.__setattr__(self, "keys", frozenset(self.keys))
        object.__setattr__(self, "yaw_delta", _f32(self.yaw_delta))
        object.__setattr__(self, "pitch_delta", _f32(self.pitch_delta))
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class Frame:
    chunk: int
    frame: int
    height: int
    width: int
    rgb: bytes

    def __post_init__(self):
        if len(self.rgb) != 3 * self.height * self.width:
            raise ValueError(f"rgb must hold {3 * self.height * self.width} bytes, got {len(self.rgb)}")


@dataclass(frozen=True)
class Prompt:
    text: str


@dataclass(frozen=True)
class Reset:
    pass


@dataclass(frozen=True)
class StatsRequest:
    pass


@dataclass(frozen=True)
class Stats:
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ErrorReply:
    code: str
    detail: str = ""


def _wrap(mtype: int, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise LengthOverflowError(f"payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD} cap")
    return _HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def encode(msg) -> bytes:
    if isinstance(msg, Action):
        mask = 0
        for k in msg.keys:
            mask |= KEY_BITS[k]
        return _wrap(MSG_ACTION, _ACTION.pack(mask, msg.yaw_delta, msg.pitch_delta, msg.timestamp))
    if isinstance(msg, Frame):
        head = _FRAME_HEAD.pack(msg.chunk, msg.frame, msg.height, msg.width)
        return _wrap(MSG_FRAME, head + msg.rgb)
    if isinstance(msg, Prompt):
        return _wrap(MSG_PROMPT, msg.text.encode())
    if isinstance(msg, Reset):
        return _wrap(MSG_RESET, b"")
    if isinstance(msg, StatsRequest):
        return _wrap(MSG_STATS_REQ, b"")
    if isinstance(msg, Stats):
        return _wrap(MSG_STATS, json.dumps(msg.data, sort_keys=True, separators=(",", ":")).encode())
    if isinstance(msg, ErrorReply):
        blob = json.dumps({"code": msg.code, "detail": msg.detail}, sort_keys=True, separators=(",", ":"))
        return _wrap(MSG_ERROR, blob.encode())
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def _decode_payload(mtype: int, payload: bytes):
    if mtype == MSG_ACTION:
        if len(payload) != _ACTION.size:
            raise MalformedPayloadError(f"ACTION payload must be {_ACTION.size} bytes, got {len(payload)}")
        mask, yaw, pitch, ts = _ACTION.unpack(payload)
        if mask & 0xF0:
            raise ReservedBitsError(f"reserved key bits set: {mask:#04x}")
        keys = frozenset(k for k, bit in KEY_BITS.items() if mask & bit)
        return Action(keys, yaw, pitch, ts)
    if mtype == MSG_FRAME:
        if len(payload) < _FRAME_HEAD.size:
            raise MalformedPayloadError("FRAME payload shorter than its header")
        chunk, frame, h, w = _FRAME_HEAD.unpack_from(payload)
        rgb = payload[_FRAME_HEAD.size:]
        if len(rgb) != 3 * h * w:
            raise MalformedPayloadError(f"FRAME {h}x{w} needs {3 * h * w} RGB bytes, got {len(rgb)}")
        return Frame(chunk, frame, h, w, rgb)
    if mtype == MSG_PROMPT:
        try:
            return Prompt(payload.decode())
        except UnicodeDecodeError as e:
            raise MalformedPayloadError(f"PROMPT is not utf-8: {e}") from None
    if mtype == MSG_RESET or mtype == MSG_STATS_REQ:
        if payload:
            raise MalformedPayloadError(f"type {mtype} carries no payload, got {len(payload)} bytes")
        return Reset() if mtype == MSG_RESET else StatsRequest()
    if mtype == MSG_STATS:
        try:
            data = json.loads(payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise MalformedPayloadError(f"STATS is not a JSON object: {e}") from None
        if not isinstance(data, dict):
            raise MalformedPayloadError("STATS is not a JSON object")
        return Stats(data)
    if mtype == MSG_ERROR:
        try:
            data = json.loads(payload.decode())
            return ErrorReply(str(data["code"]), str(data.get("detail", "")))
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise MalformedPayloadError(f"ERROR payload unreadable: {e}") from None
    raise UnknownTypeError(f"unknown message type {mtype}")


def try_decode(buf):
    """One decode attempt against the head of `buf`.

    Returns (message, bytes_consumed), or None when the buffer holds only
    part of a frame. Raises a ProtocolError whose `consumed` says how many
    bytes were skipped (the whole frame for payload-level problems, zero
    when framing itself is broken).
    """
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        return None
    magic, version, mtype, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise LengthOverflowError(f"declared payload of {length} bytes exceeds the {MAX_PAYLOAD} cap")
    total = _HEADER.size + length
    if len(buf) < total:
        return None
    try:
        msg = _decode_payload(mtype, buf[_HEADER.size:total])
    except ProtocolError as e:
        e.consumed = total  # frame boundary still known, stream resyncs
        raise
    return msg, total


class Decoder:
    """Incremental reader for a byte stream of LBWP frames.

    feed() returns every complete message and raises on the first
    malformed frame; recoverable frames are skipped before raising, so the
    caller can answer with ERROR and keep feeding. Unrecoverable failures
    (lost framing) poison the decoder: every later feed re-raises.
    """

    def __init__(self):
        self.buf = bytearray()
        self.dead: ProtocolError | None = None

    def pending(self) -> int:
        return len(self.buf)

    def feed(self, data: bytes = b"") -> list:
        if self.dead is not None:
            raise self.dead
        self.buf += data
        out = []
        while True:
            try:
                got = try_decode(self.buf)
            except ProtocolError as e:
                del self.buf[: e.consumed]
                if e.consumed == 0:
                    self.dead = e
                e.decoded = out  # messages parsed before the failure
                raise
            if got is None:
                return out
            msg, used = got
            del self.buf[:used]
            out.append(msg)
