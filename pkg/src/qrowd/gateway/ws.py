"""Minimal server-side RFC 6455 support for the push channel.

Covers exactly what /push needs: the upgrade handshake, masked client
frames in, unmasked server frames out, and the text/ping/pong/close
opcodes. Fragmented messages and extensions are rejected by closing.
"""

from __future__ import annotations

import base64
import hashlib
import struct

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes = b"") -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def encode_text(text: str) -> bytes:
    return encode_frame(OP_TEXT, text.encode("utf-8"))


def encode_close(code: int = 1000) -> bytes:
    return encode_frame(OP_CLOSE, struct.pack(">H", code))


def read_frame(reader, require_mask: bool = True) -> tuple[int, bytes] | None:
    """One complete frame, or None when the channel must close.

    Clients are required to mask (RFC 6455 section 5.1), so the server
    reads with require_mask=True and treats an unmasked or fragmented
    frame as a protocol violation; a client reading server frames passes
    require_mask=False since those arrive unmasked.
    """
    head = reader.read(2)
    if len(head) < 2:
        return None
    fin = head[0] & 0x80
    opcode = head[0] & 0x0F
    masked = head[1] & 0x80
    length = head[1] & 0x7F
    if length == 126:
        ext = reader.read(2)
        if len(ext) < 2:
            return None
        (length,) = struct.unpack(">H", ext)
    elif length == 127:
        ext = reader.read(8)
        if len(ext) < 8:
            return None
        (length,) = struct.unpack(">Q", ext)
    if not fin or (require_mask and not masked):
        return None
    mask = b"\x00\x00\x00\x00"
    if masked:
        mask = reader.read(4)
        if len(mask) < 4:
            return None
    data = reader.read(length)
    if len(data) < length:
        return None
    payload = bytes(b ^ mask[i % 4] for i, b in enumerate(data))
    return opcode, payload
