"""4-byte big-endian length-prefixed JSON messages, sync and asyncio flavours."""

from __future__ import annotations

import asyncio
import json
import socket
import struct
from typing import Any

from .errors import ProtocolError

HEADER = struct.Struct(">I")
MAX_MESSAGE_SIZE = 4 * 1024 * 1024


def encode_frame(message: dict[str, Any]) -> bytes:
    body = json.dumps(message, separators=(",", ":"), sort_keys=True).encode()
    if len(body) > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {len(body)} bytes")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> dict[str, Any]:
    try:
        message = json.loads(body)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"invalid JSON body: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError("message must be a JSON object")
    return message


def _check_length(length: int) -> None:
    if length > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message too large: {length} bytes")


async def read_message(reader: asyncio.StreamReader) -> dict[str, Any] | None:
    """Read one frame; ``None`` on clean EOF between frames."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError("truncated frame header") from exc
        return None
    (length,) = HEADER.unpack(header)
    _check_length(length)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError("truncated frame body") from exc
    return decode_body(body)


async def write_message(writer: asyncio.StreamWriter, message: dict[str, Any]) -> None:
    writer.write(encode_frame(message))
    await writer.drain()


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            if chunks:
                raise ProtocolError("connection closed mid-frame")
            raise ConnectionError("connection closed")
        chunks.extend(chunk)
    return bytes(chunks)


def recv_message(sock: socket.socket) -> dict[str, Any]:
    (length,) = HEADER.unpack(_recv_exactly(sock, HEADER.size))
    _check_length(length)
    return decode_body(_recv_exactly(sock, length))


def send_message(sock: socket.socket, message: dict[str, Any]) -> None:
    sock.sendall(encode_frame(message))


class FramedClient:
    """Blocking request/response client over one TCP connection."""

    def __init__(self, host: str, port: int, timeout: float | None = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def send(self, message: dict[str, Any]) -> None:
        send_message(self.sock, message)

    def recv(self) -> dict[str, Any]:
        return recv_message(self.sock)

    def request(self, message: dict[str, Any]) -> dict[str, Any]:
        self.send(message)
        return self.recv()

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
