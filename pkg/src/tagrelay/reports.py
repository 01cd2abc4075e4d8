"""Encrypted location reports: finder-side encryption, owner-side decryption.

Scheme: ephemeral-static X25519, key = SHA-256(shared || eph_pub || tag_pub),
AES-256-GCM over the 25-byte serialized payload with a random 12-byte nonce.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import CodecError, ValidationError, WrongKeyError
from .protocol import KEY_SIZE

PAYLOAD_SIZE = 25
NONCE_SIZE = 12
TAG_SIZE = 16
CIPHERTEXT_SIZE = PAYLOAD_SIZE + TAG_SIZE
MAX_ACCURACY = 255

_PAYLOAD_STRUCT = struct.Struct(">ddBQ")
_WIRE_HEADER = struct.Struct(">32s32s12sH")

Randomness = Callable[[int], bytes]


def saturate_accuracy(meters: float) -> int:
    return max(0, min(MAX_ACCURACY, int(round(meters))))


@dataclass(frozen=True)
class LocationPayload:
    latitude: float
    longitude: float
    accuracy: int
    observed_at: int

    def __post_init__(self):
        if not (math.isfinite(self.latitude) and abs(self.latitude) <= 90):
            raise ValidationError(f"latitude out of range: {self.latitude}")
        if not (math.isfinite(self.longitude) and abs(self.longitude) <= 180):
            raise ValidationError(f"longitude out of range: {self.longitude}")
        if not 0 <= self.accuracy <= MAX_ACCURACY:
            raise ValidationError(f"accuracy out of range: {self.accuracy}")
        if not 0 <= self.observed_at < 2**64:
            raise ValidationError(f"observed_at out of range: {self.observed_at}")

    def to_bytes(self) -> bytes:
        return _PAYLOAD_STRUCT.pack(self.latitude, self.longitude, self.accuracy, self.observed_at)

    @classmethod
    def from_bytes(cls, raw: bytes) -> LocationPayload:
        if len(raw) != PAYLOAD_SIZE:
            raise CodecError(f"location payload must be {PAYLOAD_SIZE} bytes, got {len(raw)}")
        lat, lon, acc, at = _PAYLOAD_STRUCT.unpack(raw)
        return cls(lat, lon, acc, at)


@dataclass(frozen=True)
class EncryptedReport:
    key_id: bytes
    ephemeral_public: bytes
    ciphertext: bytes
    nonce: bytes
    # not carried on the wire; the store stamps its own received_at
    uploaded_at: float = 0

    def to_wire(self) -> bytes:
        return (
            _WIRE_HEADER.pack(self.key_id, self.ephemeral_public, self.nonce, len(self.ciphertext))
            + self.ciphertext
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> EncryptedReport:
        """Parse ``key_id ‖ ephemeral ‖ nonce ‖ u16 length ‖ ciphertext``.

        Only framing is checked: the declared length must match the bytes
        present. The ciphertext size itself is validated at decryption.
        """
        if len(raw) < _WIRE_HEADER.size:
            raise CodecError(f"report wire too short: {len(raw)} bytes")
        kid, eph, nonce, length = _WIRE_HEADER.unpack_from(raw)
        body = raw[_WIRE_HEADER.size:]
        if len(body) != length:
            raise CodecError(f"ciphertext length field {length} != {len(body)} bytes present")
        return cls(key_id=kid, ephemeral_public=eph, ciphertext=bytes(body), nonce=nonce)


def key_id(public_key: bytes) -> bytes:
    if len(public_key) != KEY_SIZE:
        raise CodecError(f"public key must be {KEY_SIZE} bytes, got {len(public_key)}")
    return hashlib.sha256(public_key).digest()


def _symmetric_key(shared: bytes, ephemeral_public: bytes, tag_public: bytes) -> bytes:
    return hashlib.sha256(shared + ephemeral_public + tag_public).digest()


def encrypt_report(
    payload: LocationPayload,
    tag_public_key: bytes,
    randomness: Randomness = os.urandom,
    uploaded_at: float = 0,
) -> EncryptedReport:
    if not isinstance(payload, LocationPayload):
        raise ValidationError("payload must be a LocationPayload")
    kid = key_id(tag_public_key)
    ephemeral = X25519PrivateKey.from_private_bytes(randomness(32))
    eph_pub = ephemeral.public_key().public_bytes_raw()
    try:
        shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(tag_public_key))
    except ValueError as exc:
        raise ValidationError(f"unusable tag public key: {exc}") from exc
    nonce = randomness(NONCE_SIZE)
    ciphertext = AESGCM(_symmetric_key(shared, eph_pub, tag_public_key)).encrypt(
        nonce, payload.to_bytes(), None
    )
    return EncryptedReport(
        key_id=kid, ephemeral_public=eph_pub, ciphertext=ciphertext, nonce=nonce,
        uploaded_at=uploaded_at,
    )


def decrypt_report(report: EncryptedReport, private_scalar: bytes) -> LocationPayload:
    if len(private_scalar) != 32:
        raise CodecError("private scalar must be 32 bytes")
    if len(report.ephemeral_public) != KEY_SIZE or len(report.nonce) != NONCE_SIZE:
        raise CodecError("malformed ephemeral key or nonce length")
    if len(report.ciphertext) != CIPHERTEXT_SIZE:
        raise CodecError(
            f"ciphertext must be {CIPHERTEXT_SIZE} bytes, got {len(report.ciphertext)}"
        )
    private = X25519PrivateKey.from_private_bytes(private_scalar)
    tag_public = private.public_key().public_bytes_raw()
    try:
        shared = private.exchange(X25519PublicKey.from_public_bytes(report.ephemeral_public))
        plain = AESGCM(_symmetric_key(shared, report.ephemeral_public, tag_public)).decrypt(
            report.nonce, report.ciphertext, None
        )
    except (InvalidTag, ValueError) as exc:
        raise WrongKeyError("report failed authentication") from exc
    return LocationPayload.from_bytes(plain)
