"""Inter-nucleus wire protocol: length-prefixed canonical frames over TCP.

A frame is a 4-byte big-endian length followed by the canonical encoding of
{"type", "sender", "auth", "body"}. The auth envelope carries an identity
token whose signature covers the canonical encoding of the body (plus an
optional delegation chain). Exchanges are synchronous: one request frame,
one reply frame, over a fresh connection.
"""

from __future__ import annotations

import socket
import struct

from . import authz, canon
from .errors import MalformedField
from .overlay import OVERLAY_FRAME_TYPES

MSG = "MSG"
INVOKE = "INVOKE"
REPLY = "REPLY"
MIGRATE_OFFER = "MIGRATE_OFFER"
MIGRATE_STATE = "MIGRATE_STATE"
MIGRATE_ACK = "MIGRATE_ACK"
ERROR = "ERROR"

FRAME_TYPES = OVERLAY_FRAME_TYPES | {
    MSG, INVOKE, REPLY, MIGRATE_OFFER, MIGRATE_STATE, MIGRATE_ACK, ERROR,
}

MAX_FRAME = 32 * 1024 * 1024


def make_frame(ftype: str, sender: str, body: dict, key=None, now: int = 0,
               chain=None) -> dict:
    """Build a frame, signing the body when a key is supplied."""
    frame = {"type": ftype, "sender": sender, "auth": None, "body": body}
    if key is not None:
        token = authz.sign(key, canon.encode(body), now)
        auth = {"token": authz.token_to_json(token)}
        if chain is not None:
            auth["chain"] = authz.chain_to_json(chain)
        frame["auth"] = auth
    return frame


def check_auth(params: dict, frame: dict, now: int) -> str:
    """Verify a frame's auth envelope against its body; ACCEPT or reason."""
    auth = frame.get("auth")
    if not auth or "token" not in auth:
        return authz.SIGNATURE_INVALID
    try:
        token = authz.token_from_json(auth["token"])
        payload = canon.encode(frame.get("body"))
        if "chain" in auth:
            chain = authz.chain_from_json(auth["chain"])
            return authz.verify_chain(params, chain, token, payload, now)
        return authz.verify(params, token, payload, now)
    except (KeyError, TypeError, ValueError):
        return authz.SIGNATURE_INVALID


def encode_frame(frame: dict) -> bytes:
    if frame.get("type") not in FRAME_TYPES:
        raise MalformedField(f"unknown frame type {frame.get('type')!r}")
    data = canon.encode(frame)
    if len(data) > MAX_FRAME:
        raise MalformedField(f"frame of {len(data)} bytes exceeds limit")
    return struct.pack(">I", len(data)) + data


def decode_frame(data: bytes) -> dict:
    try:
        frame = canon.decode(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedField(f"frame is not canonical text: {exc}") from None
    if not isinstance(frame, dict):
        raise MalformedField("frame must be an object")
    for key in ("type", "sender", "body"):
        if key not in frame:
            raise MalformedField(f"frame missing {key!r}")
    return frame


def read_frame(sock: socket.socket) -> dict | None:
    """Read one frame; None on clean EOF before any bytes."""
    header = _read_exact(sock, 4, eof_ok=True)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise MalformedField(f"declared frame length {length} exceeds limit")
    return decode_frame(_read_exact(sock, length))


def _read_exact(sock, n, eof_ok=False):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if eof_ok and not buf:
                return None
            raise MalformedField("connection closed mid-frame")
        buf += chunk
    return buf


def write_frame(sock: socket.socket, frame: dict):
    sock.sendall(encode_frame(frame))


def request(addr: str, frame: dict, timeout: float = 5.0) -> dict:
    """Send one frame to host:port and wait for the single reply frame."""
    host, port = addr.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=timeout) as sock:
        write_frame(sock, frame)
        reply = read_frame(sock)
    if reply is None:
        raise MalformedField(f"no reply from {addr}")
    return reply


def error_frame(sender: str, reason: str, detail: str = "") -> dict:
    return {"type": ERROR, "sender": sender, "auth": None,
            "body": {"reason": reason, "detail": detail}}
