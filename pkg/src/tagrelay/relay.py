"""Collector -> relay server -> emitter toolkit.

Collectors forward raw advertisement bytes they hear. The server dedups by
exact bytes, remembers when each distinct advertisement was first seen,
and drives replay schedules that push the stored bytes to emitters.

The scheduling core (:class:`RelayServer`) has no notion of wall time; it
is advanced explicitly, either by the simulator's virtual clock, by
``clock`` messages in virtual mode, or by a wall-clock loop in live mode.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Iterator

from .errors import CodecError, NotFoundError, ProtocolError, ValidationError
from .framing import FramedClient
from .protocol import ADVERTISEMENT_SIZE, decode_raw
from .server import FramedService, Session

if TYPE_CHECKING:
    from .simnet.world import Observation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObservationMsg:
    collector_id: str
    advertisement: bytes
    rssi: float
    heard_at: float

    def to_json(self) -> dict[str, Any]:
        return {
            "collector_id": self.collector_id,
            "advertisement": self.advertisement.hex(),
            "rssi": self.rssi,
            "heard_at": self.heard_at,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> ObservationMsg:
        try:
            return cls(
                collector_id=str(obj["collector_id"]),
                advertisement=bytes.fromhex(obj["advertisement"]),
                rssi=float(obj["rssi"]),
                heard_at=float(obj["heard_at"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad observation message: {exc}") from exc


@dataclass
class StoredBeacon:
    beacon_id: int
    advertisement: bytes
    first_seen: float
    last_seen: float
    seen_count: int
    source_collector: str

    def to_json(self) -> dict[str, Any]:
        obj = asdict(self)
        obj["advertisement"] = self.advertisement.hex()
        return obj


@dataclass(frozen=True)
class ReplayCommand:
    beacon_id: int
    emitter_id: str
    start_at: float
    interval: float
    repeat: int | None = None  # None = until stopped

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> ReplayCommand:
        try:
            repeat = obj.get("repeat")
            return cls(
                beacon_id=int(obj["beacon_id"]),
                emitter_id=str(obj["emitter_id"]),
                start_at=float(obj["start_at"]),
                interval=float(obj["interval"]),
                repeat=None if repeat is None else int(repeat),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad replay command: {exc}") from exc

    def occurrences(self) -> Iterator[float]:
        k = 0
        while self.repeat is None or k < self.repeat:
            yield self.start_at + k * self.interval
            k += 1


@dataclass(frozen=True)
class Emission:
    at: float
    emitter_id: str
    beacon_id: int
    advertisement: bytes
    command_id: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": "emit",
            "at": self.at,
            "emitter_id": self.emitter_id,
            "beacon_id": self.beacon_id,
            "advertisement": self.advertisement.hex(),
        }


@dataclass
class _ActiveReplay:
    command_id: int
    command: ReplayCommand
    emitted: int = 0

    @property
    def next_at(self) -> float | None:
        cmd = self.command
        if cmd.repeat is not None and self.emitted >= cmd.repeat:
            return None
        return cmd.start_at + self.emitted * cmd.interval


def collector_capture(observation: Observation, collector_id: str | None = None) -> ObservationMsg:
    """Wrap a heard advertisement for the server, bytes untouched.

    Undecodable frames are forwarded too; the server is the only place that
    validates.
    """
    return ObservationMsg(
        collector_id=collector_id or observation.receiver_id,
        advertisement=bytes(observation.advertisement.to_bytes()),
        rssi=observation.rssi,
        heard_at=observation.heard_at,
    )


class RelayServer:
    """Beacon table plus replay scheduler; transport- and clock-agnostic."""

    def __init__(self, journal: str | Path | None = None):
        self.beacons: dict[int, StoredBeacon] = {}
        self._by_bytes: dict[bytes, int] = {}
        self.rejected = 0
        self.emitters: set[str] = set()
        self.followers: dict[str, float] = {}
        self._active: dict[int, _ActiveReplay] = {}
        self._next_command = 1
        self._journal = None
        if journal is not None:
            path = Path(journal)
            if path.exists():
                with path.open(encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            self._ingest(ObservationMsg.from_json(json.loads(line)))
            self._journal = path.open("a", encoding="utf-8")

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def _ingest(self, msg: ObservationMsg) -> StoredBeacon:
        raw = msg.advertisement
        beacon_id = self._by_bytes.get(raw)
        if beacon_id is None:
            beacon_id = len(self.beacons) + 1
            beacon = StoredBeacon(
                beacon_id=beacon_id, advertisement=raw, first_seen=msg.heard_at,
                last_seen=msg.heard_at, seen_count=1, source_collector=msg.collector_id,
            )
            self.beacons[beacon_id] = beacon
            self._by_bytes[raw] = beacon_id
            return beacon
        beacon = self.beacons[beacon_id]
        beacon.seen_count += 1
        if msg.heard_at < beacon.first_seen:
            beacon.first_seen = msg.heard_at
            beacon.source_collector = msg.collector_id
        beacon.last_seen = max(beacon.last_seen, msg.heard_at)
        return beacon

    def ingest(self, msg: ObservationMsg, now: float | None = None) -> StoredBeacon:
        """Store or update the beacon for ``msg``.

        Raises CodecError (counted in ``rejected``) when the bytes do not
        decode as an advertisement.
        """
        try:
            if len(msg.advertisement) != ADVERTISEMENT_SIZE:
                raise CodecError(f"advertisement must be {ADVERTISEMENT_SIZE} bytes")
            decode_raw(msg.advertisement)
        except CodecError:
            self.rejected += 1
            raise
        beacon = self._ingest(msg)
        if self._journal is not None:
            self._journal.write(json.dumps(msg.to_json(), sort_keys=True) + "\n")
            self._journal.flush()
        return beacon

    def live_emissions(self, beacon: StoredBeacon, heard_at: float) -> list[Emission]:
        """Forwarding copies of a just-ingested beacon for every following emitter."""
        return [
            Emission(heard_at + delay, emitter, beacon.beacon_id, beacon.advertisement)
            for emitter, delay in sorted(self.followers.items())
        ]

    def beacon(self, beacon_id: int) -> StoredBeacon:
        try:
            return self.beacons[beacon_id]
        except KeyError:
            raise NotFoundError(f"unknown beacon_id {beacon_id}") from None

    def latest_captured_before(self, t: float) -> StoredBeacon:
        candidates = [b for b in self.beacons.values() if b.first_seen <= t]
        if not candidates:
            raise NotFoundError(f"no beacon captured at or before {t}")
        return max(candidates, key=lambda b: (b.first_seen, b.beacon_id))

    def register_emitter(self, emitter_id: str) -> None:
        self.emitters.add(emitter_id)

    def unregister_emitter(self, emitter_id: str) -> None:
        self.emitters.discard(emitter_id)

    def follow(self, emitter_id: str, delay: float = 0) -> None:
        if emitter_id not in self.emitters:
            raise NotFoundError(f"unknown emitter {emitter_id!r}")
        if delay < 0:
            raise ValidationError("relay delay must be >= 0")
        self.followers[emitter_id] = delay

    def schedule(self, cmd: ReplayCommand, now: float) -> int:
        """Accept a replay command; returns its command id."""
        if not cmd.interval > 0:
            raise ValidationError("interval must be > 0")
        if cmd.repeat is not None and cmd.repeat < 1:
            raise ValidationError("repeat must be >= 1 or unbounded")
        if cmd.start_at < now:
            raise ValidationError(f"start_at {cmd.start_at} precedes issue time {now}")
        self.beacon(cmd.beacon_id)
        if cmd.emitter_id not in self.emitters:
            raise NotFoundError(f"unknown emitter {cmd.emitter_id!r}")
        command_id = self._next_command
        self._next_command += 1
        self._active[command_id] = _ActiveReplay(command_id, cmd)
        return command_id

    def stop(self, emitter_id: str) -> int:
        """Cancel forwarding and every pending replay for ``emitter_id``."""
        self.followers.pop(emitter_id, None)
        doomed = [cid for cid, a in self._active.items() if a.command.emitter_id == emitter_id]
        for cid in doomed:
            del self._active[cid]
        return len(doomed)

    def next_due(self) -> float | None:
        times = [a.next_at for a in self._active.values() if a.next_at is not None]
        return min(times) if times else None

    def advance(self, now: float) -> list[Emission]:
        """Pop every scheduled emission with ``at <= now`` in (at, command) order."""
        out: list[Emission] = []
        while True:
            due = [
                (a.next_at, cid) for cid, a in self._active.items()
                if a.next_at is not None and a.next_at <= now
            ]
            if not due:
                break
            at, cid = min(due)
            active = self._active[cid]
            beacon = self.beacons[active.command.beacon_id]
            out.append(Emission(at, active.command.emitter_id, beacon.beacon_id,
                                beacon.advertisement, cid))
            active.emitted += 1
            if active.next_at is None:
                del self._active[cid]
        return out


class RelayService(FramedService):
    """Wire front-end for :class:`RelayServer`.

    ``clock="virtual"``: time moves only on ``clock`` messages, and due
    emissions are pushed when it does. ``clock="wall"``: a background task
    pushes emissions as wall time reaches them.
    """

    def __init__(self, core: RelayServer, clock: str = "virtual", wall: Callable[[], float] = time.time):
        super().__init__()
        if clock not in ("virtual", "wall"):
            raise ValidationError(f"clock must be 'virtual' or 'wall', got {clock!r}")
        self.core = core
        self.clock_mode = clock
        self._wall = wall
        self.virtual_now = 0.0
        self.emitter_sessions: dict[str, Session] = {}
        self.undelivered = 0
        self._wakeup: asyncio.Event | None = None
        self._dispatcher: asyncio.Task | None = None

    def now(self) -> float:
        return self.virtual_now if self.clock_mode == "virtual" else self._wall()

    async def start(self, host: str, port: int) -> tuple[str, int]:
        address = await super().start(host, port)
        if self.clock_mode == "wall":
            self._wakeup = asyncio.Event()
            self._dispatcher = asyncio.create_task(self._wall_dispatch())
        return address

    async def close(self) -> None:
        if self._dispatcher is not None:
            self._dispatcher.cancel()
            try:
                await self._dispatcher
            except asyncio.CancelledError:
                pass
        await super().close()

    async def _wall_dispatch(self) -> None:
        while True:
            due = self.core.next_due()
            self._wakeup.clear()
            if due is None:
                await self._wakeup.wait()
                continue
            delay = due - self._wall()
            if delay > 0:
                try:
                    await asyncio.wait_for(self._wakeup.wait(), timeout=delay)
                    continue
                except asyncio.TimeoutError:
                    pass
            await self._push(self.core.advance(self._wall()))

    def _poke(self) -> None:
        if self._wakeup is not None:
            self._wakeup.set()

    async def _push(self, emissions: Iterable[Emission]) -> int:
        sent = 0
        for emission in emissions:
            session = self.emitter_sessions.get(emission.emitter_id)
            if session is None:
                self.undelivered += 1
                continue
            try:
                await session.send(emission.to_json())
                sent += 1
            except (ConnectionError, OSError):
                self.undelivered += 1
        return sent

    def on_disconnect(self, session: Session) -> None:
        if session.role == "emitter" and self.emitter_sessions.get(session.id) is session:
            del self.emitter_sessions[session.id]
            self.core.unregister_emitter(session.id)

    async def handle(self, message: dict[str, Any], session: Session) -> dict[str, Any] | None:
        kind = message.get("kind")
        if kind == "hello":
            role, ident = message.get("role"), message.get("id")
            if role not in ("collector", "emitter", "controller") or not isinstance(ident, str):
                raise ProtocolError("hello needs role in {collector, emitter, controller} and an id")
            session.role, session.id = role, ident
            if role == "emitter":
                self.emitter_sessions[ident] = session
                self.core.register_emitter(ident)
            return {"kind": "ack", "ok": True, "for": "hello", "clock": self.clock_mode}
        if kind == "observe":
            msg = ObservationMsg.from_json(message.get("observation") or {})
            try:
                beacon = self.core.ingest(msg, self.now())
            except CodecError as exc:
                return {"kind": "err", "ok": False, "error": f"malformed advertisement: {exc}"}
            await self._push(self.core.live_emissions(beacon, msg.heard_at))
            return {"kind": "ack", "ok": True, "for": "observe", "beacon": beacon.to_json()}
        if kind == "schedule":
            cmd = ReplayCommand.from_json(message.get("command") or {})
            command_id = self.core.schedule(cmd, self.now())
            self._poke()
            return {"kind": "ack", "ok": True, "for": "schedule", "command_id": command_id}
        if kind == "follow":
            self.core.follow(str(message.get("emitter_id")), float(message.get("delay", 0)))
            return {"kind": "ack", "ok": True, "for": "follow"}
        if kind == "stop":
            cancelled = self.core.stop(str(message.get("emitter_id")))
            return {"kind": "ack", "ok": True, "for": "stop", "cancelled": cancelled}
        if kind == "clock":
            if self.clock_mode != "virtual":
                raise ProtocolError("clock messages are only accepted in virtual mode")
            now = float(message["now"])
            if now < self.virtual_now:
                raise ProtocolError(f"virtual clock cannot move backwards to {now}")
            self.virtual_now = now
            sent = await self._push(self.core.advance(now))
            return {"kind": "ack", "ok": True, "for": "clock", "now": now, "emitted": sent}
        if kind == "beacons":
            beacons = [b.to_json() for _, b in sorted(self.core.beacons.items())]
            return {"kind": "ack", "ok": True, "for": "beacons", "beacons": beacons,
                    "rejected": self.core.rejected}
        raise ProtocolError(f"unknown message kind: {kind!r}")


class RelayClient(FramedClient):
    """Blocking client for collectors and controllers."""

    def __init__(self, host: str, port: int, role: str, ident: str, timeout: float | None = 10.0):
        super().__init__(host, port, timeout)
        self._checked({"kind": "hello", "role": role, "id": ident})
        self.id = ident

    def _checked(self, message: dict[str, Any]) -> dict[str, Any]:
        reply = self.request(message)
        if not reply.get("ok"):
            raise ProtocolError(reply.get("error", "request failed"))
        return reply

    def observe(self, msg: ObservationMsg) -> dict[str, Any]:
        return self._checked({"kind": "observe", "observation": msg.to_json()})["beacon"]

    def schedule(self, cmd: ReplayCommand) -> int:
        return self._checked({"kind": "schedule", "command": cmd.to_json()})["command_id"]

    def follow(self, emitter_id: str, delay: float = 0) -> None:
        self._checked({"kind": "follow", "emitter_id": emitter_id, "delay": delay})

    def stop(self, emitter_id: str) -> int:
        return self._checked({"kind": "stop", "emitter_id": emitter_id})["cancelled"]

    def advance_clock(self, now: float) -> int:
        return self._checked({"kind": "clock", "now": now})["emitted"]

    def beacons(self) -> list[dict[str, Any]]:
        return self._checked({"kind": "beacons"})["beacons"]


class EmitterClient(FramedClient):
    """Connects as an emitter and yields pushed ``emit`` messages."""

    def __init__(self, host: str, port: int, ident: str, timeout: float | None = 10.0):
        super().__init__(host, port, timeout)
        reply = self.request({"kind": "hello", "role": "emitter", "id": ident})
        if not reply.get("ok"):
            raise ProtocolError(reply.get("error", "hello rejected"))
        self.id = ident

    def emissions(self) -> Iterator[Emission]:
        while True:
            try:
                message = self.recv()
            except ConnectionError:
                return
            if message.get("kind") != "emit":
                continue
            yield Emission(
                at=float(message["at"]), emitter_id=self.id, beacon_id=int(message["beacon_id"]),
                advertisement=bytes.fromhex(message["advertisement"]),
            )


def write_capture_log(messages: Iterable[ObservationMsg], path: str | Path) -> int:
    count = 0
    with Path(path).open("w", encoding="utf-8") as fh:
        for msg in messages:
            fh.write(json.dumps(msg.to_json(), sort_keys=True) + "\n")
            count += 1
    return count


def read_capture_log(path: str | Path) -> list[ObservationMsg]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ObservationMsg.from_json(json.loads(line)))
            except (json.JSONDecodeError, ProtocolError) as exc:
                raise ProtocolError(f"{path}:{lineno}: {exc}") from exc
    return out
