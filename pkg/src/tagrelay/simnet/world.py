"""World geometry, radio model, and per-entity state for the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

from ..errors import ValidationError
from ..protocol import Advertisement, MasterSecret, RotationPolicy, current_epoch

ENTITY_KINDS = ("tag", "finder", "owner_phone", "collector", "emitter")
RECEIVER_KINDS = frozenset({"finder", "collector", "owner_phone"})
METERS_PER_DEGREE_LAT = 111_320.0

Point = tuple[float, float]


@dataclass(frozen=True)
class WorldConfig:
    ble_range: float = 30.0
    rssi_at_1m: float = -40.0
    path_loss_exponent: float = 2.0
    lost_adv_interval: float = 2.0
    connected_adv_interval: float = 30.0
    separation_delay: float = 1800.0
    # plane-to-degrees mapping origin
    origin_lat: float = 48.2082
    origin_lon: float = 16.3738
    # collector -> emitter one-way latency for live forwarding
    relay_delay: float = 0.0
    # minimum gap between two uploads by one finder for one key; 0 = every sighting
    finder_cooldown: float = 0.0
    finder_accuracy: int = 10
    local_window: float = 60.0
    owner_poll_interval: float = 60.0

    _non_negative = ("relay_delay", "finder_cooldown")
    _positive = (
        "ble_range", "path_loss_exponent", "lost_adv_interval", "connected_adv_interval",
        "separation_delay", "local_window", "owner_poll_interval",
    )

    def __post_init__(self):
        for name in self._positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"world.{name} must be > 0")
        for name in self._non_negative:
            if getattr(self, name) < 0:
                raise ValidationError(f"world.{name} must be >= 0")
        if not 0 <= self.finder_accuracy <= 255:
            raise ValidationError("world.finder_accuracy must be within 0..255")
        if abs(self.origin_lat) >= 89 or abs(self.origin_lon) > 180:
            raise ValidationError("world origin out of range")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_overrides(cls, overrides: dict[str, Any]) -> WorldConfig:
        unknown = set(overrides) - cls.field_names()
        if unknown:
            raise ValidationError(f"unknown world settings: {', '.join(sorted(unknown))}")
        return cls(**overrides)

    def to_latlon(self, position: Point) -> tuple[float, float]:
        x, y = position
        lat = self.origin_lat + y / METERS_PER_DEGREE_LAT
        lon = self.origin_lon + x / (METERS_PER_DEGREE_LAT * math.cos(math.radians(self.origin_lat)))
        return lat, lon

    def to_plane(self, lat: float, lon: float) -> Point:
        y = (lat - self.origin_lat) * METERS_PER_DEGREE_LAT
        x = (lon - self.origin_lon) * METERS_PER_DEGREE_LAT * math.cos(math.radians(self.origin_lat))
        return x, y


@dataclass
class Entity:
    id: str
    kind: str
    position: Point
    options: dict[str, Any] = field(default_factory=dict)


@dataclass
class TagRuntime:
    master_secret: MasterSecret
    policy: RotationPolicy
    powered: bool = True
    last_owner_contact: float = 0.0
    frozen_epoch: int | None = None

    def mode(self, now: float, separation_delay: float) -> str:
        return "lost" if now - self.last_owner_contact >= separation_delay else "connected"

    def epoch(self, now: float) -> int:
        if not self.powered and self.frozen_epoch is not None:
            return self.frozen_epoch
        return current_epoch(self.policy, self.master_secret.pairing_time, now)


@dataclass(frozen=True)
class Observation:
    advertisement: Advertisement
    rssi: float
    heard_at: float
    receiver_id: str


def distance(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def rssi_at(distance_m: float, config: WorldConfig) -> float:
    """Log-distance path loss; distances under 0.1 m are treated as 0.1 m."""
    return config.rssi_at_1m - 10 * config.path_loss_exponent * math.log10(max(distance_m, 0.1))


def deliver_advertisement(
    sender_position: Point,
    adv: Advertisement,
    now: float,
    receivers: Iterable[Entity],
    config: WorldConfig,
) -> list[Observation]:
    """Observations for every receiving entity within ``ble_range``, ordered by id."""
    out = []
    for entity in sorted(receivers, key=lambda e: e.id):
        if entity.kind not in RECEIVER_KINDS:
            continue
        d = distance(sender_position, entity.position)
        if d > config.ble_range:
            continue
        out.append(Observation(adv, rssi_at(d, config), now, entity.id))
    return out
