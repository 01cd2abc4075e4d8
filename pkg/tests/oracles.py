"""Independent reference computations used to freeze expected test values.

Nothing here imports tagrelay or the ``cryptography`` package.
"""

P = 2**255 - 19
A24 = 121665


def _clamp(k: bytes) -> int:
    b = bytearray(k)
    b[0] &= 248
    b[31] &= 127
    b[31] |= 64
    return int.from_bytes(b, "little")


def x25519(scalar: bytes, u: int = 9) -> bytes:
    """Montgomery ladder straight from RFC 7748 section 5."""
    k = _clamp(scalar)
    x1, x2, z2, x3, z3, swap = u, 1, 0, u, 1, 0
    for t in reversed(range(255)):
        bit = (k >> t) & 1
        swap ^= bit
        if swap:
            x2, x3, z2, z3 = x3, x2, z3, z2
        swap = bit
        a, b = (x2 + z2) % P, (x2 - z2) % P
        aa, bb = a * a % P, b * b % P
        e = (aa - bb) % P
        c, d = (x3 + z3) % P, (x3 - z3) % P
        da, cb = d * a % P, c * b % P
        x3 = (da + cb) ** 2 % P
        z3 = x1 * (da - cb) ** 2 % P
        x2 = aa * bb % P
        z2 = e * (aa + A24 * e) % P
    if swap:
        x2, z2 = x3, z3
    return (x2 * pow(z2, P - 2, P) % P).to_bytes(32, "little")


def hand_built_advertisement(key: bytes, lost: bool) -> bytes:
    """Byte-by-byte construction of the 34-byte frame, written without the codec."""
    out = bytearray(34)
    out[0] = key[0] | 0b1100_0000
    for i in range(1, 6):
        out[i] = key[i]
    out[6] = 1 if lost else 0
    for i in range(6, 32):
        out[7 + i - 6] = key[i]
    out[33] = (key[0] & 0b1100_0000) >> 6
    return bytes(out)
