"""Shared asyncio TCP service scaffolding for the cloud store and relay server."""

from __future__ import annotations

import asyncio
import logging
import signal
from typing import Any

from .errors import ProtocolError, TagRelayError
from .framing import read_message, write_message

log = logging.getLogger(__name__)


class Session:
    """One connected client. ``role``/``id`` are filled by a hello message."""

    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.role: str | None = None
        self.id: str | None = None
        self._lock = asyncio.Lock()

    async def send(self, message: dict[str, Any]) -> None:
        async with self._lock:
            await write_message(self.writer, message)

    @property
    def peer(self) -> str:
        info = self.writer.get_extra_info("peername")
        return f"{info[0]}:{info[1]}" if info else "?"


class FramedService:
    """Subclasses implement :meth:`handle`; a returned dict is sent as the reply."""

    def __init__(self):
        self._server: asyncio.base_events.Server | None = None
        self.sessions: set[Session] = set()

    async def handle(self, message: dict[str, Any], session: Session) -> dict[str, Any] | None:
        raise NotImplementedError

    def on_disconnect(self, session: Session) -> None:
        pass

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session = Session(writer)
        self.sessions.add(session)
        log.debug("connection from %s", session.peer)
        try:
            while True:
                try:
                    message = await read_message(reader)
                except ProtocolError as exc:
                    await session.send({"ok": False, "error": str(exc)})
                    break
                if message is None:
                    break
                try:
                    reply = await self.handle(message, session)
                except (TagRelayError, KeyError, TypeError, ValueError) as exc:
                    reply = {"ok": False, "error": str(exc)}
                if reply is not None:
                    await session.send(reply)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.sessions.discard(session)
            self.on_disconnect(session)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self, host: str, port: int) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._client, host, port)
        sockname = self._server.sockets[0].getsockname()
        return sockname[0], sockname[1]

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            for session in list(self.sessions):
                session.writer.close()
            await self._server.wait_closed()

    async def serve_until_signalled(self, host: str, port: int, on_ready=None) -> None:
        address = await self.start(host, port)
        if on_ready is not None:
            on_ready(address)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        try:
            await stop.wait()
        finally:
            await self.close()
