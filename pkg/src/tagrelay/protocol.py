"""Key schedule and the bit-exact advertisement codec.

Advertisement layout (34 bytes on the wire)::

    mac[0:6]      = key[0:6], with the two MSBs of mac[0] forced to 1
    payload[0]    = status byte (bit 0 lost, bit 1 battery_low)
    payload[1:27] = key[6:32]
    payload[27]   = original two MSBs of key[0], in the low 2 bits

Keys are 32-byte X25519 public keys.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from .errors import CodecError, InvalidTimeError, MalformedAdvertisementError, ValidationError

KEY_SIZE = 32
MAC_SIZE = 6
PAYLOAD_SIZE = 28
ADVERTISEMENT_SIZE = MAC_SIZE + PAYLOAD_SIZE
DEFAULT_ROTATION_PERIOD = 86400

_STATUS_LOST = 0x01
_STATUS_BATTERY_LOW = 0x02
_MAC_MSBS = 0xC0


@dataclass(frozen=True)
class MasterSecret:
    bytes: bytes
    pairing_time: float = 0

    def __post_init__(self):
        if len(self.bytes) != 32:
            raise ValidationError(f"master secret must be 32 bytes, got {len(self.bytes)}")
        if self.pairing_time < 0:
            raise ValidationError("pairing_time must be >= 0")


@dataclass(frozen=True)
class EpochKeypair:
    epoch: int
    private_scalar: bytes
    public_key: bytes


@dataclass(frozen=True)
class RotationPolicy:
    period: float = DEFAULT_ROTATION_PERIOD

    def __post_init__(self):
        if not self.period > 0:
            raise ValidationError("rotation period must be positive")


@dataclass(frozen=True)
class TagStatus:
    lost: bool = False
    battery_low: bool = False

    def to_byte(self) -> int:
        return (_STATUS_LOST if self.lost else 0) | (_STATUS_BATTERY_LOW if self.battery_low else 0)

    @classmethod
    def from_byte(cls, value: int) -> TagStatus:
        if value & ~(_STATUS_LOST | _STATUS_BATTERY_LOW):
            raise MalformedAdvertisementError(f"reserved status bits set: 0x{value:02x}")
        return cls(lost=bool(value & _STATUS_LOST), battery_low=bool(value & _STATUS_BATTERY_LOW))


@dataclass(frozen=True)
class Advertisement:
    mac: bytes
    payload: bytes

    def to_bytes(self) -> bytes:
        return self.mac + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> Advertisement:
        """Split raw bytes into MAC and payload without validating the layout."""
        if len(raw) != ADVERTISEMENT_SIZE:
            raise MalformedAdvertisementError(
                f"advertisement must be {ADVERTISEMENT_SIZE} bytes, got {len(raw)}"
            )
        return cls(mac=bytes(raw[:MAC_SIZE]), payload=bytes(raw[MAC_SIZE:]))

    def hex(self) -> str:
        return self.to_bytes().hex()


def clamp_scalar(raw: bytes) -> bytes:
    scalar = bytearray(raw)
    scalar[0] &= 248
    scalar[31] &= 127
    scalar[31] |= 64
    return bytes(scalar)


@lru_cache(maxsize=8192)
def _derive(secret: bytes, epoch: int) -> EpochKeypair:
    scalar = clamp_scalar(hashlib.sha256(secret + epoch.to_bytes(8, "big")).digest())
    public = X25519PrivateKey.from_private_bytes(scalar).public_key().public_bytes_raw()
    return EpochKeypair(epoch=epoch, private_scalar=scalar, public_key=public)


def derive_epoch_keypair(secret: MasterSecret, epoch: int) -> EpochKeypair:
    """Derive the keypair a tag uses during ``epoch``.

    The private scalar is SHA-256(secret || epoch as u64 big-endian), clamped
    for X25519. Results are cached; the function is pure.
    """
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return _derive(secret.bytes, int(epoch))


def current_epoch(policy: RotationPolicy, pairing_time: float, now: float) -> int:
    if now < pairing_time:
        raise InvalidTimeError(f"time {now} precedes pairing time {pairing_time}")
    return math.floor((now - pairing_time) / policy.period)


def epoch_start(policy: RotationPolicy, pairing_time: float, epoch: int) -> float:
    return pairing_time + epoch * policy.period


def encode_advertisement(public_key: bytes, status: TagStatus) -> Advertisement:
    if len(public_key) != KEY_SIZE:
        raise CodecError(f"public key must be {KEY_SIZE} bytes, got {len(public_key)}")
    mac = bytes([public_key[0] | _MAC_MSBS]) + public_key[1:MAC_SIZE]
    bits = public_key[0] >> 6
    payload = bytes([status.to_byte()]) + public_key[MAC_SIZE:] + bytes([bits])
    return Advertisement(mac=mac, payload=payload)


def decode_advertisement(adv: Advertisement) -> tuple[bytes, TagStatus]:
    """Recover ``(public_key, status)``; raises MalformedAdvertisementError."""
    if len(adv.mac) != MAC_SIZE or len(adv.payload) != PAYLOAD_SIZE:
        raise MalformedAdvertisementError(
            f"expected {MAC_SIZE}+{PAYLOAD_SIZE} bytes, got {len(adv.mac)}+{len(adv.payload)}"
        )
    if adv.mac[0] & _MAC_MSBS != _MAC_MSBS:
        raise MalformedAdvertisementError("mac[0] must have its two MSBs set")
    bits = adv.payload[-1]
    if bits & 0xFC:
        raise MalformedAdvertisementError(f"reserved bits set in bits byte: 0x{bits:02x}")
    status = TagStatus.from_byte(adv.payload[0])
    first = (adv.mac[0] & 0x3F) | (bits << 6)
    key = bytes([first]) + adv.mac[1:] + adv.payload[1:-1]
    return key, status


def decode_raw(raw: bytes) -> tuple[bytes, TagStatus]:
    return decode_advertisement(Advertisement.from_bytes(raw))
