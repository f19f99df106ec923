"""secp256k1 helpers shared by key derivation and re-encryption."""

import hashlib
from functools import lru_cache

from Crypto.Hash import RIPEMD160
from ecdsa import SECP256k1
from ecdsa.ellipticcurve import INFINITY, PointJacobi
from ecdsa.errors import MalformedPointError

from idchain.exceptions import KeyFormatError


CURVE = SECP256k1
# gmpy2-backed ecdsa hands out mpz values, which pydantic int fields reject
ORDER: int = int(SECP256k1.order)
GENERATOR: PointJacobi = SECP256k1.generator


def scalar_to_bytes(scalar: int) -> bytes:
    return scalar.to_bytes(32, "big")


def is_valid_scalar(scalar: int) -> bool:
    return 0 < scalar < ORDER


def point_from_bytes(data: bytes) -> PointJacobi:
    """Decode a 33-byte compressed point."""
    if len(data) != 33 or data[0] not in (2, 3):
        raise KeyFormatError("Expected a 33-byte compressed secp256k1 point")
    try:
        return PointJacobi.from_bytes(CURVE.curve, data, order=ORDER)
    except (MalformedPointError, AssertionError, ValueError) as e:
        raise KeyFormatError(f"Invalid secp256k1 point: {e}") from e


def point_to_bytes(point: PointJacobi) -> bytes:
    if point == INFINITY:
        raise KeyFormatError("The point at infinity has no encoding")
    return point.to_bytes("compressed")


def is_infinity(point) -> bool:
    return point == INFINITY


@lru_cache(maxsize=8192)
def public_bytes(scalar: int) -> bytes:
    """Compressed encoding of scalar·G."""
    return point_to_bytes(GENERATOR * scalar)


def hash160(data: bytes) -> bytes:
    return RIPEMD160.new(hashlib.sha256(data).digest()).digest()
