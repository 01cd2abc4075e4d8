"""Owner-side client: key lookup, cloud/local ingestion, and reconciliation.

Display rules:

* a cloud report counts only if its key epoch equals the newest epoch the
  owner has seen in any accepted observation (cloud or local);
* a local sighting within ``local_window`` seconds beats any cloud data,
  even when the sighted key belongs to an old epoch;
* whatever is displayed is flagged outdated once its key epoch ended at
  least seven days ago.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from .errors import CodecError, InvalidEpochError, WrongKeyError
from .protocol import (
    Advertisement, MasterSecret, RotationPolicy, current_epoch, decode_advertisement,
    derive_epoch_keypair,
)
from .reports import LocationPayload, decrypt_report, key_id

log = logging.getLogger(__name__)

OUTDATED_AFTER = 7 * 86400
QUERY_EPOCHS = 9
DEFAULT_LOCAL_WINDOW = 60.0


@dataclass(frozen=True)
class OwnerView:
    location: LocationPayload | None
    source: str  # "cloud" | "local" | "none"
    outdated: bool
    displayed_key_epoch: int | None
    as_of: float


@dataclass(frozen=True)
class CloudEntry:
    payload: LocationPayload
    epoch: int
    received_at: float
    report_seq: int


@dataclass(frozen=True)
class LocalBeacon:
    advertisement: Advertisement
    heard_at: float
    epoch: int


@dataclass
class AcceptanceState:
    latest_observed_epoch: int = -1
    last_local_beacon: LocalBeacon | None = None
    accepted_cloud: list[CloudEntry] = field(default_factory=list)
    seen_seqs: set[int] = field(default_factory=set)
    skipped: int = 0

    def observe_epoch(self, epoch: int) -> None:
        self.latest_observed_epoch = max(self.latest_observed_epoch, epoch)

    def eligible_cloud(self) -> list[CloudEntry]:
        return [e for e in self.accepted_cloud if e.epoch == self.latest_observed_epoch]


class ReportSource(Protocol):
    def fetch(self, key_ids: Iterable[bytes], since: float = 0) -> list: ...


DisplayStrategy = Callable[[list[CloudEntry]], CloudEntry]


def latest_wins(entries: list[CloudEntry]) -> CloudEntry:
    return max(entries, key=lambda e: (e.received_at, e.report_seq))


class KeyRing:
    """Owner's view of the tag's key schedule, extended lazily as time passes."""

    def __init__(self, secret: MasterSecret, policy: RotationPolicy):
        self.secret = secret
        self.policy = policy
        self._by_key_id: dict[bytes, int] = {}
        self._by_public: dict[bytes, int] = {}
        self._known_upto = -1

    def epoch_now(self, now: float) -> int:
        return current_epoch(self.policy, self.secret.pairing_time, now)

    def _extend(self, upto: int) -> None:
        for epoch in range(self._known_upto + 1, upto + 1):
            public = derive_epoch_keypair(self.secret, epoch).public_key
            self._by_public[public] = epoch
            self._by_key_id[key_id(public)] = epoch
        self._known_upto = max(self._known_upto, upto)

    def epoch_of_key_id(self, kid: bytes, now: float) -> int | None:
        upto = self.epoch_now(now)
        self._extend(upto)
        epoch = self._by_key_id.get(kid)
        return epoch if epoch is not None and epoch <= upto else None

    def epoch_of_public_key(self, public: bytes, now: float) -> int | None:
        upto = self.epoch_now(now)
        self._extend(upto)
        epoch = self._by_public.get(public)
        return epoch if epoch is not None and epoch <= upto else None

    def private_scalar(self, epoch: int) -> bytes:
        return derive_epoch_keypair(self.secret, epoch).private_scalar


def expected_key_ids(
    secret: MasterSecret, policy: RotationPolicy, now: float, window: int = QUERY_EPOCHS
) -> list[bytes]:
    """Key IDs to query: the current epoch and up to ``window - 1`` before it."""
    e_now = current_epoch(policy, secret.pairing_time, now)
    return [
        key_id(derive_epoch_keypair(secret, e).public_key)
        for e in range(max(0, e_now - (window - 1)), e_now + 1)
    ]


def ingest_cloud(records: Iterable, state: AcceptanceState, now: float, keys: KeyRing) -> AcceptanceState:
    """Decrypt fetched records into ``state``; undecryptable ones are counted and skipped."""
    for record in records:
        if record.report_seq in state.seen_seqs:
            continue
        state.seen_seqs.add(record.report_seq)
        epoch = keys.epoch_of_key_id(record.report.key_id, now)
        if epoch is None:
            state.skipped += 1
            continue
        try:
            payload = decrypt_report(record.report, keys.private_scalar(epoch))
        except (WrongKeyError, CodecError) as exc:
            log.debug("skipping report %d: %s", record.report_seq, exc)
            state.skipped += 1
            continue
        state.accepted_cloud.append(CloudEntry(payload, epoch, record.received_at, record.report_seq))
        state.observe_epoch(epoch)
    return state


def ingest_local(adv: Advertisement, heard_at: float, state: AcceptanceState, keys: KeyRing) -> AcceptanceState:
    """Record a locally heard advertisement if it belongs to this tag, whatever its epoch."""
    try:
        public, _status = decode_advertisement(adv)
    except CodecError:
        return state
    epoch = keys.epoch_of_public_key(public, heard_at)
    if epoch is None:
        return state
    state.last_local_beacon = LocalBeacon(adv, heard_at, epoch)
    state.observe_epoch(epoch)
    return state


def staleness(epoch: int, policy: RotationPolicy, pairing_time: float, now: float) -> float:
    """Seconds since ``epoch`` stopped being the current key epoch; 0 while current."""
    if epoch > current_epoch(policy, pairing_time, now):
        raise InvalidEpochError(f"epoch {epoch} lies in the future at t={now}")
    return max(0, now - (pairing_time + (epoch + 1) * policy.period))


def is_outdated(epoch: int, policy: RotationPolicy, pairing_time: float, now: float) -> bool:
    return staleness(epoch, policy, pairing_time, now) >= OUTDATED_AFTER


def reconcile(
    state: AcceptanceState,
    now: float,
    policy: RotationPolicy,
    pairing_time: float,
    owner_location: tuple[float, float] | None = None,
    local_window: float = DEFAULT_LOCAL_WINDOW,
    strategy: DisplayStrategy = latest_wins,
) -> OwnerView:
    local = state.last_local_beacon
    if local is not None and now - local.heard_at <= local_window:
        location = None
        if owner_location is not None:
            location = LocationPayload(owner_location[0], owner_location[1], 0, int(local.heard_at))
        return OwnerView(
            location=location,
            source="local",
            outdated=is_outdated(local.epoch, policy, pairing_time, now),
            displayed_key_epoch=local.epoch,
            as_of=now,
        )
    eligible = state.eligible_cloud()
    if not eligible:
        return OwnerView(None, "none", False, None, now)
    chosen = strategy(eligible)
    return OwnerView(
        location=chosen.payload,
        source="cloud",
        outdated=is_outdated(chosen.epoch, policy, pairing_time, now),
        displayed_key_epoch=chosen.epoch,
        as_of=now,
    )


class OwnerClient:
    """Stateful owner app for one tag, polling a cloud store or client."""

    def __init__(
        self,
        secret: MasterSecret,
        policy: RotationPolicy,
        cloud: ReportSource,
        position: tuple[float, float] | None = None,
        local_window: float = DEFAULT_LOCAL_WINDOW,
        strategy: DisplayStrategy = latest_wins,
    ):
        self.cloud = cloud
        self.position = position
        self.local_window = local_window
        self.strategy = strategy
        self.state = AcceptanceState()
        self._last_poll: float | None = None
        self.repair(secret, policy)

    def repair(self, secret: MasterSecret, policy: RotationPolicy) -> None:
        """Forget everything and follow a newly paired secret."""
        self.secret = secret
        self.policy = policy
        self.keys = KeyRing(secret, policy)
        self.state = AcceptanceState()
        self._last_poll = None

    def hear(self, adv: Advertisement, heard_at: float) -> None:
        ingest_local(adv, heard_at, self.state, self.keys)

    def poll(self, now: float) -> OwnerView:
        if now >= self.secret.pairing_time:
            since = 0 if self._last_poll is None else self._last_poll
            records = self.cloud.fetch(expected_key_ids(self.secret, self.policy, now), since)
            ingest_cloud(records, self.state, now, self.keys)
            self._last_poll = now
        return self.view(now)

    def view(self, now: float) -> OwnerView:
        if now < self.secret.pairing_time:
            return OwnerView(None, "none", False, None, now)
        return reconcile(
            self.state, now, self.policy, self.secret.pairing_time, self.position,
            self.local_window, self.strategy,
        )
