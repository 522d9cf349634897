"""Wire protocol: canonical newline-delimited JSON records plus a minimal
WebSocket framing layer for browser subscribers.

Every encoder emits a canonical byte form (compact separators, fixed key
order, shortest round-trip float repr) so decode→encode is the identity on
well-formed records and golden fixtures can be compared byte-for-byte.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .retarget import BlendshapeFrame

CONTROL_KINDS = ("set_character", "recalibrate", "set_params", "subscribe",
                 "list_characters")

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def _reject_constant(name):
    raise FormatError(f"non-finite JSON constant {name!r} not allowed")


def _loads(line) -> dict:
    if isinstance(line, (bytes, bytearray)):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"record is not valid UTF-8: {e}") from e
    try:
        doc = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise FormatError(f"record is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError("record must be a JSON object")
    return doc


def _dumps(obj) -> str:
    try:
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False,
                          allow_nan=False)
    except ValueError as e:
        raise FormatError(f"record not representable as JSON: {e}") from e


def _number(doc, key) -> float:
    v = doc.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FormatError(f"field {key!r} must be a number")
    v = float(v)
    if not np.isfinite(v):
        raise FormatError(f"field {key!r} must be finite")
    return v


def _number_list(doc, key) -> list:
    v = doc.get(key)
    if not isinstance(v, list) or not v:
        raise FormatError(f"field {key!r} must be a non-empty array")
    out = []
    for x in v:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise FormatError(f"field {key!r} must contain only numbers")
        x = float(x)
        if not np.isfinite(x):
            raise FormatError(f"field {key!r} must be finite")
        out.append(x)
    return out


# --- frame ingestion records: {"t": float, "w": [float...]} ---

def encode_frame(frame: BlendshapeFrame) -> str:
    return _dumps({"t": float(frame.timestamp), "w": [float(x) for x in frame.weights]})


def parse_frame(line) -> BlendshapeFrame:
    doc = _loads(line)
    t = _number(doc, "t")
    w = _number_list(doc, "w")
    return BlendshapeFrame(t, np.array(w))


# --- broadcast records: {"t", "char", "v", "stale"} ---

@dataclass(frozen=True)
class BroadcastRecord:
    t: float
    char: str
    v: tuple
    stale: bool = False

    def values(self) -> np.ndarray:
        return np.array(self.v, dtype=np.float64)


def encode_broadcast(rec: BroadcastRecord) -> str:
    return _dumps({
        "t": float(rec.t),
        "char": rec.char,
        "v": [float(x) for x in rec.v],
        "stale": bool(rec.stale),
    })


def parse_broadcast(line) -> BroadcastRecord:
    doc = _loads(line)
    t = _number(doc, "t")
    char = doc.get("char")
    if not isinstance(char, str) or not char:
        raise FormatError("field 'char' must be a non-empty string")
    v = _number_list(doc, "v")
    stale = doc.get("stale")
    if not isinstance(stale, bool):
        raise FormatError("field 'stale' must be a boolean")
    return BroadcastRecord(t, char, tuple(v), stale)


# --- control messages: {"kind", "args"} / acks {"ok", "kind", "seq"} ---

@dataclass(frozen=True)
class ControlMessage:
    kind: str
    args: dict = field(default_factory=dict)


def _validate_control(msg: ControlMessage) -> ControlMessage:
    if msg.kind not in CONTROL_KINDS:
        raise FormatError(f"unknown control kind {msg.kind!r}")
    args = msg.args
    if not isinstance(args, dict):
        raise FormatError("field 'args' must be an object")
    if msg.kind == "set_character":
        if not isinstance(args.get("char"), str) or not args["char"]:
            raise FormatError("set_character needs a non-empty 'char' string")
    elif msg.kind == "recalibrate":
        frames = args.get("frames", 30)
        if isinstance(frames, bool) or not isinstance(frames, int) or frames < 1:
            raise FormatError("recalibrate 'frames' must be a positive integer")
    elif msg.kind == "set_params":
        for key in args:
            if key not in ("target_fps", "stale_timeout"):
                raise FormatError(f"set_params does not accept {key!r}")
        for key in ("target_fps", "stale_timeout"):
            if key in args:
                v = args[key]
                if isinstance(v, bool) or not isinstance(v, (int, float)) \
                        or not np.isfinite(float(v)) or float(v) <= 0.0:
                    raise FormatError(f"set_params {key!r} must be > 0")
    elif args:
        raise FormatError(f"{msg.kind} takes no arguments")
    return msg


def encode_control(msg: ControlMessage) -> str:
    _validate_control(msg)
    return _dumps({"kind": msg.kind, "args": msg.args})


def parse_control(line) -> ControlMessage:
    doc = _loads(line)
    kind = doc.get("kind")
    if not isinstance(kind, str):
        raise FormatError("field 'kind' must be a string")
    args = doc.get("args", {})
    return _validate_control(ControlMessage(kind, args))


@dataclass(frozen=True)
class Ack:
    ok: bool
    kind: str
    seq: int
    data: dict | None = None
    error: str | None = None


def encode_ack(ack: Ack) -> str:
    doc = {"ok": bool(ack.ok), "kind": ack.kind, "seq": int(ack.seq)}
    if ack.data is not None:
        doc["data"] = ack.data
    if ack.error is not None:
        doc["error"] = ack.error
    return _dumps(doc)


def parse_ack(line) -> Ack:
    doc = _loads(line)
    ok = doc.get("ok")
    if not isinstance(ok, bool):
        raise FormatError("field 'ok' must be a boolean")
    kind = doc.get("kind")
    if not isinstance(kind, str):
        raise FormatError("field 'kind' must be a string")
    seq = doc.get("seq")
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise FormatError("field 'seq' must be an integer")
    return Ack(ok, kind, seq, doc.get("data"), doc.get("error"))


# --- metrics records: {"metrics": {...}} ---

def encode_metrics(metrics: dict) -> str:
    return _dumps({"metrics": metrics})


def parse_metrics(line) -> dict:
    doc = _loads(line)
    m = doc.get("metrics")
    if not isinstance(m, dict):
        raise FormatError("field 'metrics' must be an object")
    return m


def classify(line) -> str:
    """Which record family a broadcast-channel line belongs to."""
    doc = _loads(line)
    if "metrics" in doc:
        return "metrics"
    if "ok" in doc:
        return "ack"
    if "char" in doc:
        return "broadcast"
    if "kind" in doc:
        return "control"
    if "w" in doc:
        return "frame"
    raise FormatError("unrecognized record shape")


# --- NDJSON stream files ---

def save_stream(frames, path) -> None:
    """Write blendshape frames, one canonical record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in frames:
            fh.write(encode_frame(f) + "\n")


def load_stream(path) -> list[BlendshapeFrame]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                frames.append(parse_frame(line))
            except (FormatError, ValidationError) as e:
                raise FormatError(f"{path}:{i}: {e}") from e
    return frames


def save_output_stream(records, path) -> None:
    """Write broadcast records, one canonical record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(encode_broadcast(r) + "\n")


def load_output_stream(path) -> list[BroadcastRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parse_broadcast(line))
            except (FormatError, ValidationError) as e:
                raise FormatError(f"{path}:{i}: {e}") from e
    return records


# --- WebSocket framing (server side, text frames only) ---

def ws_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def ws_handshake_response(client_key: str) -> bytes:
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {ws_accept_key(client_key)}\r\n"
        "\r\n"
    ).encode("ascii")


def ws_encode_text(payload) -> bytes:
    """Single unmasked FIN text frame (server to client)."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    n = len(payload)
    if n < 126:
        header = struct.pack("!BB", 0x81, n)
    elif n < 1 << 16:
        header = struct.pack("!BBH", 0x81, 126, n)
    else:
        header = struct.pack("!BBQ", 0x81, 127, n)
    return header + payload


def ws_encode_close(code: int = 1000) -> bytes:
    return struct.pack("!BBH", 0x88, 2, code)


def ws_encode_pong(payload: bytes = b"") -> bytes:
    return struct.pack("!BB", 0x8A, len(payload)) + payload


class WSDecoder:
    """Incremental decoder for masked client frames.

    feed() returns a list of (opcode, payload) tuples; fragmented messages
    are reassembled. Unmasked client frames are a protocol error.
    """

    def __init__(self):
        self._buf = bytearray()
        self._fragments = []

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            frame = self._next_frame()
            if frame is None:
                return out
            fin, opcode, payload = frame
            if opcode == 0x0:  # continuation
                if not self._fragments:
                    raise FormatError("continuation frame with no message started")
                self._fragments.append((None, payload))
                if fin:
                    first_op = self._fragments[0][0]
                    whole = b"".join(p for _, p in self._fragments)
                    self._fragments = []
                    out.append((first_op, whole))
            elif opcode in (0x1, 0x2):
                if self._fragments:
                    raise FormatError("new data frame while a message is in flight")
                if fin:
                    out.append((opcode, payload))
                else:
                    self._fragments = [(opcode, payload)]
            elif opcode in (0x8, 0x9, 0xA):
                if not fin:
                    raise FormatError("control frames must not be fragmented")
                out.append((opcode, payload))
            else:
                raise FormatError(f"unsupported WebSocket opcode {opcode:#x}")

    def _next_frame(self):
        buf = self._buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = struct.unpack_from("!H", buf, 2)[0]
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = struct.unpack_from("!Q", buf, 2)[0]
            offset = 10
        if not masked:
            raise FormatError("client frames must be masked")
        if len(buf) < offset + 4 + length:
            return None
        mask = bytes(buf[offset:offset + 4])
        raw = bytes(buf[offset + 4:offset + 4 + length])
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(raw))
        del buf[:offset + 4 + length]
        return fin, opcode, payload
