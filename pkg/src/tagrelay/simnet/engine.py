"""Deterministic discrete-event simulator.

Events run in (time, entity id, sequence) order. All randomness (tag
secrets when not given, ephemeral keys, nonces) comes from one
``random.Random`` seeded from the scenario, so a (scenario, seed) pair
always produces the same log.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
import random
from dataclasses import dataclass
from typing import Callable

from ..cloud import CloudStore
from ..errors import CodecError, NotFoundError, ValidationError
from ..owner import OwnerClient, OwnerView
from ..protocol import (
    Advertisement, MasterSecret, RotationPolicy, TagStatus, decode_advertisement,
    derive_epoch_keypair, encode_advertisement,
)
from ..relay import Emission, ObservationMsg, RelayServer, ReplayCommand, collector_capture
from ..reports import EncryptedReport, LocationPayload, Randomness, encrypt_report
from .eventlog import Event, EventLog
from .scenario import EntitySpec, ScenarioScript, TimelineEntry
from .world import Entity, Observation, Point, TagRuntime, WorldConfig, deliver_advertisement

log = logging.getLogger(__name__)


def finder_behavior(
    observation: Observation,
    finder_position: Point,
    config: WorldConfig,
    upload: Callable[[EncryptedReport, float], int],
    randomness: Randomness,
) -> tuple[EncryptedReport, int] | None:
    """Encrypt the finder's own position to the advertised key and upload it.

    Returns ``(report, report_seq)``, or ``None`` for a tag that is not in
    lost mode. Raises MalformedAdvertisementError for undecodable frames.
    """
    public, status = decode_advertisement(observation.advertisement)
    if not status.lost:
        return None
    lat, lon = config.to_latlon(finder_position)
    payload = LocationPayload(lat, lon, config.finder_accuracy, int(observation.heard_at))
    report = encrypt_report(payload, public, randomness, uploaded_at=observation.heard_at)
    return report, upload(report, observation.heard_at)


def derived_secret(seed: int, tag_id: str, generation: int = 0) -> bytes:
    return hashlib.sha256(f"tagrelay:{seed}:{tag_id}:{generation}".encode()).digest()


@dataclass
class _TagState:
    runtime: TagRuntime
    generation: int = 0
    pairings: int = 0
    last_mode: str | None = None


class Simulation:
    def __init__(self, scenario: ScenarioScript, seed: int | None = None):
        self.scenario = scenario
        self.config = scenario.world
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.now: float = 0
        self.log = EventLog()
        self.cloud = CloudStore()
        self.relay = RelayServer()
        self.entities: dict[str, Entity] = {}
        self.tags: dict[str, _TagState] = {}
        self.owners: dict[str, OwnerClient] = {}
        self.owner_views: dict[str, list[OwnerView]] = {}
        self.captures: list[ObservationMsg] = []
        self.dropped: dict[str, int] = {}
        self._queue: list = []
        self._seq = 0
        self._last_upload: dict[tuple[str, bytes], float] = {}
        self._truth: dict[bytes, tuple[str, int]] = {}
        self._dispatch_times: set[float] = set()
        self._receivers: list[Entity] = []

        # tags first so owner phones can bind to them
        for spec in sorted(scenario.entities, key=lambda s: s.kind != "tag"):
            self._add_entity(spec)
        self._receivers = sorted(
            (e for e in self.entities.values() if e.kind in ("finder", "collector", "owner_phone")),
            key=lambda e: e.id,
        )
        for entry in scenario.timeline:
            self._schedule(entry.at, _primary_entity(entry), self._timeline, entry)

    # -- setup -------------------------------------------------------------

    def _add_entity(self, spec: EntitySpec) -> None:
        entity = Entity(spec.id, spec.kind, spec.position, dict(spec.options))
        self.entities[spec.id] = entity
        opts = spec.options
        if spec.kind == "tag":
            secret_hex = opts.get("secret")
            raw = bytes.fromhex(secret_hex) if secret_hex else derived_secret(self.seed, spec.id)
            secret = MasterSecret(raw, opts.get("pairing_time", 0))
            policy = RotationPolicy(opts.get("period", 86400))
            contact = secret.pairing_time
            if opts.get("mode") == "lost":
                contact -= self.config.separation_delay
            runtime = TagRuntime(secret, policy, powered=True, last_owner_contact=contact)
            self.tags[spec.id] = _TagState(runtime)
            if opts.get("powered", True):
                self._schedule(secret.pairing_time, spec.id, self._tag_tick, spec.id, 0)
            else:
                runtime.powered = False
                runtime.frozen_epoch = 0
        elif spec.kind == "owner_phone":
            tag_id = opts["tag"]
            runtime = self.tags[tag_id].runtime if tag_id in self.tags else None
            if runtime is None:
                raise ValidationError(f"owner_phone {spec.id} listed before its tag {tag_id}")
            self.owners[spec.id] = OwnerClient(
                runtime.master_secret, runtime.policy, self.cloud,
                position=self.config.to_latlon(spec.position),
                local_window=self.config.local_window,
            )
            self.owner_views[spec.id] = []
            self._schedule(opts.get("poll_offset", 0), spec.id, self._owner_poll, spec.id)
        elif spec.kind == "emitter":
            self.relay.register_emitter(spec.id)

    # -- event queue -------------------------------------------------------

    def _schedule(self, at: float, entity_id: str, handler: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, entity_id, self._seq, handler, args))

    def run_until(self, until: float) -> EventLog:
        """Process every event with time <= ``until``; may be called repeatedly."""
        while self._queue and self._queue[0][0] <= until:
            at, _entity, _seq, handler, args = heapq.heappop(self._queue)
            self.now = at
            handler(*args)
        self.now = max(self.now, until)
        return self.log

    def _emit(self, event: str, entity: str, **fields) -> None:
        self.log.append(Event(self.now, event, entity, **fields))

    # -- radio -------------------------------------------------------------

    def _deliver(self, sender: Entity, adv: Advertisement) -> None:
        for obs in deliver_advertisement(sender.position, adv, self.now, self._receivers, self.config):
            receiver = self.entities[obs.receiver_id]
            if receiver.kind == "finder":
                self._finder_heard(receiver, obs)
            elif receiver.kind == "collector":
                self._collector_heard(obs)
            elif receiver.kind == "owner_phone":
                self.owners[receiver.id].hear(obs.advertisement, obs.heard_at)

    def _finder_heard(self, finder: Entity, obs: Observation) -> None:
        raw = obs.advertisement.to_bytes()
        if self.config.finder_cooldown > 0:
            try:
                public, _ = decode_advertisement(obs.advertisement)
            except CodecError:
                public = raw
            last = self._last_upload.get((finder.id, public))
            if last is not None and self.now - last < self.config.finder_cooldown:
                return
        try:
            result = finder_behavior(obs, finder.position, self.config, self.cloud.upload, self.rng.randbytes)
        except CodecError:
            self.dropped[finder.id] = self.dropped.get(finder.id, 0) + 1
            self._emit("drop", finder.id, flags="malformed")
            return
        if result is None:
            return
        report, seq = result
        public, _ = decode_advertisement(obs.advertisement)
        self._last_upload[(finder.id, public)] = self.now
        lat, lon = self.config.to_latlon(finder.position)
        truth = self._truth.get(public)
        self._emit(
            "upload", finder.id, key_epoch=truth[1] if truth else None, lat=lat, lon=lon,
            flags=f"seq={seq} key={report.key_id[:4].hex()}", data=report,
        )

    def _collector_heard(self, obs: Observation) -> None:
        msg = collector_capture(obs)
        self.captures.append(msg)
        self._emit("capture", msg.collector_id, data=msg.advertisement)
        try:
            beacon = self.relay.ingest(msg, self.now)
        except CodecError:
            self._emit("reject", "relay", flags="malformed")
            return
        self._emit("ingest", "relay", flags=f"beacon={beacon.beacon_id} seen={beacon.seen_count}")
        for emission in self.relay.live_emissions(beacon, msg.heard_at):
            self._schedule(emission.at, emission.emitter_id, self._emitter_emit, emission)

    # -- tags --------------------------------------------------------------

    def _tag_tick(self, tag_id: str, generation: int) -> None:
        state = self.tags[tag_id]
        rt = state.runtime
        if generation != state.generation or not rt.powered:
            return
        mode = rt.mode(self.now, self.config.separation_delay)
        if mode != state.last_mode:
            if state.last_mode is not None:
                self._emit("mode", tag_id, flags=mode)
            state.last_mode = mode
        epoch = rt.epoch(self.now)
        public = derive_epoch_keypair(rt.master_secret, epoch).public_key
        self._truth[public] = (tag_id, epoch)
        adv = encode_advertisement(public, TagStatus(lost=mode == "lost"))
        self._emit("advertise", tag_id, key_epoch=epoch, flags=mode, data=adv)
        self._deliver(self.entities[tag_id], adv)

        interval = self.config.lost_adv_interval if mode == "lost" else self.config.connected_adv_interval
        nxt = self.now + interval
        boundary = rt.master_secret.pairing_time + (epoch + 1) * rt.policy.period
        if self.now < boundary < nxt:
            nxt = boundary
        if mode == "connected":
            lost_at = rt.last_owner_contact + self.config.separation_delay
            if self.now < lost_at < nxt:
                nxt = lost_at
        self._schedule(nxt, tag_id, self._tag_tick, tag_id, generation)

    def set_tag_power(self, tag_id: str, powered: bool, now: float | None = None) -> TagRuntime:
        """Battery in or out. Off freezes the epoch; on resumes at the time-derived epoch."""
        if tag_id not in self.tags:
            raise NotFoundError(f"unknown tag {tag_id!r}")
        now = self.now if now is None else now
        state = self.tags[tag_id]
        rt = state.runtime
        if not powered and rt.powered:
            rt.frozen_epoch = rt.epoch(now)
            rt.powered = False
            state.generation += 1
        elif powered and not rt.powered:
            rt.powered = True
            rt.frozen_epoch = None
            state.generation += 1
            self._schedule(now, tag_id, self._tag_tick, tag_id, state.generation)
        return rt

    # -- relay -------------------------------------------------------------

    def _emitter_emit(self, emission: Emission) -> None:
        emitter = self.entities[emission.emitter_id]
        adv = Advertisement.from_bytes(emission.advertisement)
        try:
            public, _ = decode_advertisement(adv)
            truth = self._truth.get(public)
        except CodecError:
            truth = None
        self._emit(
            "emit", emitter.id, key_epoch=truth[1] if truth else None,
            flags=f"beacon={emission.beacon_id}", data=emission.advertisement,
        )
        self._deliver(emitter, adv)

    def _dispatch_relay(self) -> None:
        self._dispatch_times.discard(self.now)
        for emission in self.relay.advance(self.now):
            self._emitter_emit(emission)
        self._arm_dispatch()

    def _arm_dispatch(self) -> None:
        due = self.relay.next_due()
        if due is not None and due not in self._dispatch_times:
            self._dispatch_times.add(due)
            self._schedule(due, "relay", self._dispatch_relay)

    def _start_relay(self, args: dict) -> None:
        emitter = args["emitter"]
        if args["mode"] == "live":
            delay = args.get("delay")
            self.relay.follow(emitter, self.config.relay_delay if delay is None else delay)
            self._emit("start_relay", emitter, flags="live")
            return
        if "beacon" in args:
            beacon = self.relay.beacon(int(args["beacon"]))
        else:
            beacon = self.relay.latest_captured_before(args["captured_before"])
        cmd = ReplayCommand(
            beacon_id=beacon.beacon_id, emitter_id=emitter,
            start_at=args.get("start_at") if args.get("start_at") is not None else self.now,
            interval=args["interval"], repeat=args.get("repeat"),
        )
        self.relay.schedule(cmd, self.now)
        truth = self._truth.get(decode_advertisement(Advertisement.from_bytes(beacon.advertisement))[0])
        self._emit(
            "start_relay", emitter, key_epoch=truth[1] if truth else None,
            flags=f"replay beacon={beacon.beacon_id} first_seen={beacon.first_seen:g}",
        )
        self._arm_dispatch()

    # -- owner -------------------------------------------------------------

    def _owner_poll(self, phone_id: str) -> None:
        view = self.owners[phone_id].poll(self.now)
        self.owner_views[phone_id].append(view)
        lat = lon = None
        if view.location is not None:
            lat, lon = view.location.latitude, view.location.longitude
        self._emit(
            "owner", phone_id, key_epoch=view.displayed_key_epoch, lat=lat, lon=lon,
            source=view.source, flags="outdated" if view.outdated else "", data=view,
        )
        interval = self.entities[phone_id].options.get("poll_interval", self.config.owner_poll_interval)
        self._schedule(self.now + interval, phone_id, self._owner_poll, phone_id)

    # -- timeline ----------------------------------------------------------

    def _timeline(self, entry: TimelineEntry) -> None:
        args = entry.args
        action = entry.action
        try:
            if action == "move":
                entity = self.entities[args["entity"]]
                entity.position = args["position"]
                if entity.kind == "owner_phone":
                    self.owners[entity.id].position = self.config.to_latlon(entity.position)
                lat, lon = self.config.to_latlon(entity.position)
                self._emit("move", entity.id, lat=lat, lon=lon)
            elif action == "power":
                rt = self.set_tag_power(args["tag"], args["on"])
                flags = "on" if args["on"] else f"off frozen_epoch={rt.frozen_epoch}"
                self._emit("power", args["tag"], key_epoch=rt.epoch(self.now), flags=flags)
            elif action == "pair":
                self._pair(args["tag"], args.get("secret"))
            elif action == "owner_contact":
                state = self.tags[args["tag"]]
                state.runtime.last_owner_contact = self.now
                self._emit("owner_contact", args["tag"])
                if state.last_mode == "lost":
                    state.last_mode = "connected"
                    self._emit("mode", args["tag"], flags="connected")
            elif action == "start_relay":
                self._start_relay(args)
            elif action == "stop_relay":
                cancelled = self.relay.stop(args["emitter"])
                self._emit("stop_relay", args["emitter"], flags=f"cancelled={cancelled}")
        except (NotFoundError, ValidationError) as exc:
            self._emit("error", _primary_entity(entry), flags=f"timeline[{entry.index}] {exc}")

    def _pair(self, tag_id: str, secret_hex: str | None) -> None:
        state = self.tags[tag_id]
        state.pairings += 1
        raw = bytes.fromhex(secret_hex) if secret_hex else derived_secret(self.seed, tag_id, state.pairings)
        rt = state.runtime
        rt.master_secret = MasterSecret(raw, self.now)
        rt.last_owner_contact = self.now
        rt.frozen_epoch = None if rt.powered else 0
        state.last_mode = None
        for phone_id, owner in self.owners.items():
            if self.entities[phone_id].options.get("tag") == tag_id:
                owner.repair(rt.master_secret, rt.policy)
        self._emit("pair", tag_id, key_epoch=0)
        if rt.powered:
            state.generation += 1
            self._schedule(self.now, tag_id, self._tag_tick, tag_id, state.generation)


def _primary_entity(entry: TimelineEntry) -> str:
    args = entry.args
    for key in ("entity", "tag", "emitter"):
        if key in args:
            return str(args[key])
    return ""


def run(scenario: ScenarioScript, until: float, seed: int | None = None) -> EventLog:
    """Run ``scenario`` from t=0 through ``until`` and return its event log."""
    return Simulation(scenario, seed).run_until(until)
