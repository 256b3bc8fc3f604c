"""Length-prefixed frames between coordinator and edge nodes.

frame   = 4-byte big-endian payload length || payload
payload = version (1 byte) || kind (1 byte) || canonical JSON body

Model parameters travel inside the JSON body as base64 of the binary
``ModelParams`` encoding.
"""

from __future__ import annotations

import base64
import enum
import json
import socket
import struct
from dataclasses import dataclass
from typing import Any, Mapping

from .fl import ModelParams

__all__ = [
    "WIRE_VERSION",
    "MAX_FRAME",
    "MessageKind",
    "Message",
    "FrameError",
    "TruncatedFrame",
    "UnknownVersion",
    "UnknownKind",
    "MalformedBody",
    "FrameTooLarge",
    "encode",
    "decode",
    "decode_frame",
    "canonical_json",
    "model_to_b64",
    "model_from_b64",
    "send_message",
    "recv_message",
]

WIRE_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct(">I")


class MessageKind(enum.IntEnum):
    SUBMIT = 1
    TASK = 2
    RESULT = 3
    FINAL = 4
    ERROR = 5
    HELLO = 6


class FrameError(ValueError):
    pass


class TruncatedFrame(FrameError):
    pass


class UnknownVersion(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class MalformedBody(FrameError):
    pass


class FrameTooLarge(FrameError):
    pass


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    body: Mapping[str, Any]


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode()


def model_to_b64(m: ModelParams) -> str:
    return base64.b64encode(m.to_bytes()).decode("ascii")


def model_from_b64(text: str) -> ModelParams:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as e:
        raise MalformedBody(f"bad model encoding: {e}") from None
    try:
        return ModelParams.from_bytes(raw)
    except ValueError as e:
        raise MalformedBody(f"bad model payload: {e}") from None


def encode(msg: Message) -> bytes:
    payload = bytes([WIRE_VERSION, int(msg.kind)]) + canonical_json(dict(msg.body))
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes")
    return _LEN.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Message:
    if len(payload) < 2:
        raise TruncatedFrame("payload shorter than its header")
    if payload[0] != WIRE_VERSION:
        raise UnknownVersion(f"version {payload[0]}")
    try:
        kind = MessageKind(payload[1])
    except ValueError:
        raise UnknownKind(f"kind {payload[1]}") from None
    try:
        body = json.loads(payload[2:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedBody(str(e)) from None
    if not isinstance(body, dict):
        raise MalformedBody("body must be a JSON object")
    return Message(kind, body)


def decode_frame(data: bytes) -> tuple[Message, bytes]:
    """Decode one frame from the front of ``data``; return it and the rest."""
    if len(data) < 4:
        raise TruncatedFrame("missing length prefix")
    (n,) = _LEN.unpack_from(data)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"declared length {n}")
    if len(data) < 4 + n:
        raise TruncatedFrame(f"declared {n} bytes, have {len(data) - 4}")
    return _decode_payload(bytes(data[4 : 4 + n])), bytes(data[4 + n :])


def decode(frame: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, rest = decode_frame(frame)
    if rest:
        raise MalformedBody(f"{len(rest)} trailing bytes after frame")
    return msg


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                raise EOFError("connection closed")
            raise TruncatedFrame(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_message(sock: socket.socket) -> Message:
    """Read one frame. ``EOFError`` on a clean close between frames."""
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise FrameTooLarge(f"declared length {n}")
    try:
        payload = _recv_exact(sock, n)
    except EOFError:
        raise TruncatedFrame("connection closed inside a frame") from None
    return _decode_payload(payload)


def send_message(sock: socket.socket, msg: Message) -> int:
    data = encode(msg)
    sock.sendall(data)
    return len(data)
