import hashlib
import hmac
import logging
from enum import Enum
from typing import Annotated, Optional, Union

import base58
from ecdsa import BadSignatureError, SigningKey, VerifyingKey
from ecdsa.errors import MalformedPointError
from pydantic import BaseModel, ConfigDict, Field, field_validator

from idchain.core.config import settings
from idchain.exceptions import (
    DepthOverflowError,
    DerivationError,
    HardenedDerivationError,
    InvalidSeedError,
    KeyFormatError,
)
from idchain.hdkeys.curve import (
    CURVE,
    GENERATOR,
    ORDER,
    hash160,
    is_infinity,
    is_valid_scalar,
    point_from_bytes,
    point_to_bytes,
    public_bytes,
    scalar_to_bytes,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


HARDENED_OFFSET = 0x80000000
MAX_INDEX = 0xFFFFFFFF
MAX_DEPTH = 255
MASTER_HMAC_KEY = b"Bitcoin seed"
SERIALIZED_LENGTH = 78


class Mode(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


# Version bytes: (private, public). Additive mode uses the standard mainnet xprv/xpub
# prefixes; multiplicative mode has its own pair so keys from the two trees never mix.
VERSION_BYTES: dict[Mode, tuple[bytes, bytes]] = {
    Mode.ADDITIVE: (bytes.fromhex("0488ade4"), bytes.fromhex("0488b21e")),
    Mode.MULTIPLICATIVE: (bytes.fromhex("04a0cd3c"), bytes.fromhex("04a0d176")),
}

ChainCode = Annotated[bytes, Field(min_length=32, max_length=32)]
Fingerprint = Annotated[bytes, Field(min_length=4, max_length=4)]


class _ExtendedKey(BaseModel):
    chain_code: ChainCode
    depth: int = Field(default=0, ge=0, le=MAX_DEPTH)
    child_index: int = Field(default=0, ge=0, le=MAX_INDEX)
    parent_fingerprint: Fingerprint = b"\x00" * 4
    mode: Mode = Mode.MULTIPLICATIVE

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    @property
    def is_hardened(self) -> bool:
        return self.child_index >= HARDENED_OFFSET

    def _header(self, private: bool) -> bytes:
        version = VERSION_BYTES[self.mode][0 if private else 1]
        return (
            version
            + self.depth.to_bytes(1, "big")
            + self.parent_fingerprint
            + self.child_index.to_bytes(4, "big")
            + self.chain_code
        )

    def to_base58(self) -> str:
        return base58.b58encode_check(self.to_bytes()).decode("ascii")

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    def __str__(self) -> str:
        return self.to_base58()


class ExtendedPublicKey(_ExtendedKey):
    point: Annotated[bytes, Field(min_length=33, max_length=33)]

    @field_validator("point")
    @classmethod
    def check_point(cls, value: bytes) -> bytes:
        point_from_bytes(value)
        return value

    def fingerprint(self) -> bytes:
        return hash160(self.point)[:4]

    def to_bytes(self) -> bytes:
        return self._header(private=False) + self.point

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExtendedPublicKey":
        key = parse_extended_key(data)
        if not isinstance(key, ExtendedPublicKey):
            raise KeyFormatError("Expected an extended public key")
        return key

    @classmethod
    def from_base58(cls, text: str) -> "ExtendedPublicKey":
        return cls.from_bytes(_b58decode(text))

    @classmethod
    def from_hex(cls, text: str) -> "ExtendedPublicKey":
        return cls.from_bytes(_hexdecode(text))


class ExtendedPrivateKey(_ExtendedKey):
    scalar: int

    @field_validator("scalar")
    @classmethod
    def check_scalar(cls, value: int) -> int:
        if not is_valid_scalar(value):
            raise ValueError("Private scalar must be in [1, n-1]")
        return value

    def __repr_args__(self):
        for name, value in super().__repr_args__():
            yield (name, "<hidden>") if name == "scalar" else (name, value)

    @property
    def public_bytes(self) -> bytes:
        return public_bytes(self.scalar)

    def fingerprint(self) -> bytes:
        return hash160(self.public_bytes)[:4]

    def to_bytes(self) -> bytes:
        return self._header(private=True) + b"\x00" + scalar_to_bytes(self.scalar)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExtendedPrivateKey":
        key = parse_extended_key(data)
        if not isinstance(key, ExtendedPrivateKey):
            raise KeyFormatError("Expected an extended private key")
        return key

    @classmethod
    def from_base58(cls, text: str) -> "ExtendedPrivateKey":
        return cls.from_bytes(_b58decode(text))

    @classmethod
    def from_hex(cls, text: str) -> "ExtendedPrivateKey":
        return cls.from_bytes(_hexdecode(text))


ExtendedKey = Union[ExtendedPrivateKey, ExtendedPublicKey]


def _b58decode(text: str) -> bytes:
    try:
        return base58.b58decode_check(text)
    except ValueError as e:
        raise KeyFormatError(f"Invalid base58check key: {e}") from e


def _hexdecode(text: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError as e:
        raise KeyFormatError(f"Invalid hex key: {e}") from e


def parse_extended_key(data: Union[bytes, str]) -> ExtendedKey:
    """Decode a 78-byte serialized key, or its base58check text form."""
    if isinstance(data, str):
        data = _b58decode(data)
    if len(data) != SERIALIZED_LENGTH:
        raise KeyFormatError(
            f"Extended key must be {SERIALIZED_LENGTH} bytes, got {len(data)}"
        )
    version, body = data[:4], data[4:]
    for mode, (private_version, public_version) in VERSION_BYTES.items():
        if version in (private_version, public_version):
            break
    else:
        raise KeyFormatError(f"Unknown extended key version {version.hex()}")

    depth = body[0]
    parent_fingerprint = body[1:5]
    child_index = int.from_bytes(body[5:9], "big")
    chain_code = body[9:41]
    key_data = body[41:]
    if depth == 0 and (parent_fingerprint != b"\x00" * 4 or child_index != 0):
        raise KeyFormatError("Master key must have zero parent fingerprint and index")

    common = dict(
        chain_code=chain_code,
        depth=depth,
        child_index=child_index,
        parent_fingerprint=parent_fingerprint,
        mode=mode,
    )
    try:
        if version == private_version:
            if key_data[0] != 0:
                raise KeyFormatError("Private key material must start with 0x00")
            return ExtendedPrivateKey(
                scalar=int.from_bytes(key_data[1:], "big"), **common
            )
        return ExtendedPublicKey(point=key_data, **common)
    except ValueError as e:
        if isinstance(e, KeyFormatError):
            raise
        raise KeyFormatError(f"Invalid extended key material: {e}") from e


def master_from_seed(
    seed: bytes, mode: Optional[Union[Mode, str]] = None
) -> ExtendedPrivateKey:
    if not 16 <= len(seed) <= 64:
        raise InvalidSeedError(f"Seed must be 16 to 64 bytes, got {len(seed)}")
    mode = Mode(mode or settings.DEFAULT_KEY_MODE)

    counter = 0
    data = seed
    while True:
        digest = hmac.new(MASTER_HMAC_KEY, data, hashlib.sha512).digest()
        scalar = int.from_bytes(digest[:32], "big")
        if is_valid_scalar(scalar):
            break
        counter += 1
        logger.warning(f"Master candidate out of range, retrying with {counter=}")
        data = seed + counter.to_bytes(4, "big")

    return ExtendedPrivateKey(scalar=scalar, chain_code=digest[32:], mode=mode)


def _raw_index(index: int, hardened: bool) -> int:
    if hardened:
        if not 0 <= index < HARDENED_OFFSET:
            raise DerivationError(f"Hardened index {index} must be below 2^31")
        return index + HARDENED_OFFSET
    if not 0 <= index <= MAX_INDEX:
        raise DerivationError(f"Child index {index} must be a 32-bit unsigned integer")
    return index


def _check_depth(parent: _ExtendedKey) -> None:
    if parent.depth >= MAX_DEPTH:
        raise DepthOverflowError(f"Cannot derive below depth {MAX_DEPTH}")


def _next_index(raw: int) -> int:
    following = raw + 1
    if following == HARDENED_OFFSET or following > MAX_INDEX:
        raise DerivationError(f"No valid child left after index {raw}")
    return following


def derivation_tweak(
    chain_code: bytes, raw_index: int, public: bytes, scalar: Optional[int] = None
) -> tuple[int, bytes]:
    """Return (IL, IR) for a child index.

    Hardened indices key the HMAC on the private scalar, all others on the
    compressed public point.
    """
    if raw_index >= HARDENED_OFFSET:
        if scalar is None:
            raise HardenedDerivationError(raw_index)
        data = b"\x00" + scalar_to_bytes(scalar)
    else:
        data = public
    data += raw_index.to_bytes(4, "big")
    digest = hmac.new(chain_code, data, hashlib.sha512).digest()
    return int.from_bytes(digest[:32], "big"), digest[32:]


def ckd_priv(
    parent: ExtendedPrivateKey, index: int, hardened: bool = False
) -> ExtendedPrivateKey:
    _check_depth(parent)
    raw = _raw_index(index, hardened)
    parent_public = parent.public_bytes

    while True:
        tweak, chain_code = derivation_tweak(
            parent.chain_code, raw, parent_public, parent.scalar
        )
        if parent.mode is Mode.ADDITIVE:
            child = (tweak + parent.scalar) % ORDER
            valid = is_valid_scalar(tweak) and child != 0
        else:
            child = (tweak * parent.scalar) % ORDER
            valid = is_valid_scalar(tweak)
        if valid:
            break
        logger.warning(f"Invalid tweak at index {raw}, retrying at {raw + 1}")
        raw = _next_index(raw)

    return ExtendedPrivateKey(
        scalar=child,
        chain_code=chain_code,
        depth=parent.depth + 1,
        child_index=raw,
        parent_fingerprint=hash160(parent_public)[:4],
        mode=parent.mode,
    )


def ckd_pub(parent: ExtendedPublicKey, index: int) -> ExtendedPublicKey:
    if index >= HARDENED_OFFSET:
        raise HardenedDerivationError(index)
    _check_depth(parent)
    raw = _raw_index(index, hardened=False)
    parent_point = point_from_bytes(parent.point)

    while True:
        tweak, chain_code = derivation_tweak(parent.chain_code, raw, parent.point)
        if is_valid_scalar(tweak):
            if parent.mode is Mode.ADDITIVE:
                child = GENERATOR * tweak + parent_point
            else:
                child = parent_point * tweak
            if not is_infinity(child):
                break
        logger.warning(f"Invalid tweak at index {raw}, retrying at {raw + 1}")
        raw = _next_index(raw)

    return ExtendedPublicKey(
        point=point_to_bytes(child),
        chain_code=chain_code,
        depth=parent.depth + 1,
        child_index=raw,
        parent_fingerprint=parent.fingerprint(),
        mode=parent.mode,
    )


def neuter(key: ExtendedPrivateKey) -> ExtendedPublicKey:
    return ExtendedPublicKey(
        point=key.public_bytes,
        chain_code=key.chain_code,
        depth=key.depth,
        child_index=key.child_index,
        parent_fingerprint=key.parent_fingerprint,
        mode=key.mode,
    )


class PathStep(BaseModel):
    index: int = Field(ge=0, lt=HARDENED_OFFSET)
    hardened: bool = False

    model_config = ConfigDict(frozen=True)

    def __str__(self) -> str:
        return f"{self.index}'" if self.hardened else str(self.index)


class DerivationPath(BaseModel):
    steps: tuple[PathStep, ...] = ()

    model_config = ConfigDict(frozen=True)

    @classmethod
    def parse(cls, text: str) -> "DerivationPath":
        """Parse "m/1'/2/3". Hardened steps may be marked with ', h or H."""
        parts = text.strip().split("/")
        if parts[0] not in ("m", "M"):
            raise KeyFormatError(f"Derivation path must start with 'm': {text!r}")
        steps = []
        for part in parts[1:]:
            hardened = part[-1:] in ("'", "h", "H")
            digits = part[:-1] if hardened else part
            if not (digits.isascii() and digits.isdigit()):
                raise KeyFormatError(f"Invalid path component {part!r} in {text!r}")
            index = int(digits)
            if index >= HARDENED_OFFSET:
                raise KeyFormatError(f"Path index {index} must be below 2^31")
            steps.append(PathStep(index=index, hardened=hardened))
        return cls(steps=tuple(steps))

    def child(self, index: int, hardened: bool = False) -> "DerivationPath":
        return DerivationPath(
            steps=self.steps + (PathStep(index=index, hardened=hardened),)
        )

    def __len__(self) -> int:
        return len(self.steps)

    def __str__(self) -> str:
        return "/".join(["m", *(str(step) for step in self.steps)])


def derive_path(root: ExtendedKey, path: Union[DerivationPath, str]) -> ExtendedKey:
    if isinstance(path, str):
        path = DerivationPath.parse(path)
    if root.depth + len(path) > MAX_DEPTH:
        raise DepthOverflowError(
            f"Path of length {len(path)} exceeds the maximum depth from depth "
            f"{root.depth}"
        )
    key = root
    for step in path.steps:
        if isinstance(key, ExtendedPrivateKey):
            key = ckd_priv(key, step.index, step.hardened)
        elif step.hardened:
            raise HardenedDerivationError(step.index + HARDENED_OFFSET)
        else:
            key = ckd_pub(key, step.index)
    return key


class Signature(BaseModel):
    r: int
    s: int

    model_config = ConfigDict(frozen=True)

    @field_validator("r", "s")
    @classmethod
    def check_range(cls, value: int) -> int:
        if not is_valid_scalar(value):
            raise ValueError("Signature components must be in [1, n-1]")
        return value

    def to_bytes(self) -> bytes:
        return scalar_to_bytes(self.r) + scalar_to_bytes(self.s)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Signature":
        if len(data) != 64:
            raise KeyFormatError(f"Signature must be 64 bytes, got {len(data)}")
        try:
            return cls(
                r=int.from_bytes(data[:32], "big"), s=int.from_bytes(data[32:], "big")
            )
        except ValueError as e:
            raise KeyFormatError(f"Invalid signature: {e}") from e


def _encode_low_s(r: int, s: int, order: int) -> Signature:
    r, s, order = int(r), int(s), int(order)
    if s > order // 2:
        s = order - s
    return Signature(r=r, s=s)


def _decode_signature(signature: Signature, order: int) -> tuple[int, int]:
    return signature.r, signature.s


def sign(key: ExtendedPrivateKey, message: bytes) -> Signature:
    """RFC 6979 deterministic ECDSA over SHA-256, low-s normalized."""
    signing_key = SigningKey.from_secret_exponent(
        key.scalar, curve=CURVE, hashfunc=hashlib.sha256
    )
    return signing_key.sign_deterministic(message, sigencode=_encode_low_s)


def verify(
    key: Union[ExtendedPublicKey, bytes],
    message: bytes,
    signature: Union[Signature, bytes],
) -> bool:
    """Check a signature against an extended public key or a compressed point."""
    point = key if isinstance(key, bytes) else key.point
    try:
        if isinstance(signature, bytes):
            signature = Signature.from_bytes(signature)
        if signature.s > ORDER // 2:
            return False
        verifying_key = VerifyingKey.from_string(
            point, curve=CURVE, hashfunc=hashlib.sha256
        )
        return verifying_key.verify(signature, message, sigdecode=_decode_signature)
    except (BadSignatureError, MalformedPointError, KeyFormatError, ValueError):
        return False
