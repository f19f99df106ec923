"""Identity-based conditional proxy re-encryption.

Hashed ElGamal on secp256k1 with the condition folded into the ephemeral point:

    encrypt      E = (r / h_c)·G, shared = r·Q_A
    direct       shared = (a·h_c)·E
    rkgen        X = x·G, d = H(X, Q_B, x·Q_B, commitment), rk = a·h_c / d
    reencrypt    E' = rk·E
    delegated    shared = H(X, Q_B, b·X, commitment)·E'

The shared point keys an AES-256-GCM wrap of a per-envelope content key; the
payload is sealed under that content key with the condition commitment as
associated data. A re-encryption key for one condition cannot transform
envelopes created under another, and the proxy never sees the shared point.
"""

import hashlib
import logging
import os
import struct
from enum import Enum
from typing import Annotated, Callable, Literal, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from pydantic import BaseModel, ConfigDict, Field, field_validator

from idchain.exceptions import (
    ConditionMismatchError,
    DecryptionFailedError,
    EmptyConditionError,
    IdentityMismatchError,
    InvalidIdentityError,
    KeyFormatError,
    LevelMismatchError,
    PlaintextTooLargeError,
    ReEncryptionError,
    SelfDelegationError,
    UnknownIdentityError,
    UnsupportedParameterError,
)
from idchain.hdkeys.curve import (
    GENERATOR,
    ORDER,
    is_valid_scalar,
    point_from_bytes,
    point_to_bytes,
    public_bytes,
    scalar_to_bytes,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


ENVELOPE_VERSION = 1
MAX_PLAINTEXT = 16 * 1024 * 1024
MAX_CONDITION_BYTES = 256
TAG_LENGTH = 16
ZERO_NONCE = b"\x00" * 12
SUPPORTED_PARAMETERS = {128: "sha256", 256: "sha512"}

Rng = Callable[[int], bytes]


class Level(str, Enum):
    ORIGINAL = "original"
    REENCRYPTED = "reencrypted"


_LEVEL_CODES = {Level.ORIGINAL: 0, Level.REENCRYPTED: 1}
_LEVELS_BY_CODE = {code: level for level, code in _LEVEL_CODES.items()}


def _hash_name(security_parameter: int) -> str:
    try:
        return SUPPORTED_PARAMETERS[security_parameter]
    except KeyError:
        raise UnsupportedParameterError(
            f"Security parameter must be one of {sorted(SUPPORTED_PARAMETERS)}, "
            f"got {security_parameter}"
        ) from None


def _length_prefixed(*parts: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(part)) + part for part in parts)


def _hash_to_scalar(hash_name: str, label: bytes, *parts: bytes) -> int:
    counter = 0
    while True:
        digest = hashlib.new(
            hash_name, _length_prefixed(label, counter.to_bytes(4, "big"), *parts)
        ).digest()
        scalar = int.from_bytes(digest, "big") % ORDER
        if scalar:
            return scalar
        counter += 1


def _kdf(hash_name: str, key_material: bytes, info: bytes) -> bytes:
    algorithm = hashes.SHA256() if hash_name == "sha256" else hashes.SHA512()
    return HKDF(algorithm=algorithm, length=32, salt=None, info=info).derive(
        key_material
    )


def _random_scalar(rng: Rng) -> int:
    while True:
        scalar = int.from_bytes(rng(32), "big")
        if is_valid_scalar(scalar):
            return scalar


def _check_identity(identity: str) -> bytes:
    if not identity:
        raise InvalidIdentityError("Identity must be a nonempty string")
    return identity.encode("utf-8")


class ConditionTag(BaseModel):
    value: str

    model_config = ConfigDict(frozen=True)

    @field_validator("value")
    @classmethod
    def check_length(cls, value: str) -> str:
        if not 1 <= len(value.encode("utf-8")) <= MAX_CONDITION_BYTES:
            raise ValueError(
                f"Condition tag must be 1 to {MAX_CONDITION_BYTES} bytes of UTF-8"
            )
        return value

    def __str__(self) -> str:
        return self.value


def _condition_bytes(condition: Union[ConditionTag, str]) -> bytes:
    text = condition.value if isinstance(condition, ConditionTag) else condition
    data = text.encode("utf-8")
    if not 1 <= len(data) <= MAX_CONDITION_BYTES:
        raise EmptyConditionError(
            f"Condition tag must be 1 to {MAX_CONDITION_BYTES} bytes of UTF-8"
        )
    return data


def condition_commitment(condition: Union[ConditionTag, str], identity: str) -> bytes:
    return hashlib.sha256(
        _length_prefixed(
            b"idchain condition", _condition_bytes(condition), _check_identity(identity)
        )
    ).digest()


def _condition_scalar(
    hash_name: str, condition: Union[ConditionTag, str], identity: str
) -> int:
    return _hash_to_scalar(
        hash_name,
        b"idchain condition scalar",
        _condition_bytes(condition),
        _check_identity(identity),
    )


class SystemParams(BaseModel):
    security_parameter: Literal[128, 256]
    curve: str = "secp256k1"
    hash_name: str
    cipher: str = "aes-256-gcm"
    master_public: Annotated[bytes, Field(min_length=33, max_length=33)]
    identity_keys: dict[str, bytes] = {}

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    def public_key(self, identity: str) -> bytes:
        try:
            return self.identity_keys[identity]
        except KeyError:
            raise UnknownIdentityError(
                f"No IBCPRE public key published for identity '{identity}'"
            ) from None


class MasterSecret(BaseModel):
    seed: Annotated[bytes, Field(min_length=32, max_length=32)]
    security_parameter: Literal[128, 256]

    model_config = ConfigDict(frozen=True)

    def __repr__(self) -> str:
        return f"<MasterSecret(security_parameter={self.security_parameter})>"


class IdentitySecretKey(BaseModel):
    identity: str
    scalar: int
    security_parameter: Literal[128, 256]

    model_config = ConfigDict(frozen=True)

    def __repr__(self) -> str:
        return f"<IdentitySecretKey(identity={self.identity!r})>"

    @property
    def hash_name(self) -> str:
        return _hash_name(self.security_parameter)

    @property
    def public_bytes(self) -> bytes:
        return public_bytes(self.scalar)


class ReEncryptionKey(BaseModel):
    delegator_identity: str
    delegatee_identity: str
    condition: ConditionTag
    security_parameter: Literal[128, 256]
    translation_token: Annotated[bytes, Field(min_length=65, max_length=65)]

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    @property
    def scalar(self) -> int:
        return int.from_bytes(self.translation_token[:32], "big")

    @property
    def delegation_point(self) -> bytes:
        return self.translation_token[32:]

    @property
    def commitment(self) -> bytes:
        return condition_commitment(self.condition, self.delegator_identity)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, length: int) -> bytes:
        if self.offset + length > len(self.data):
            raise ValueError("truncated envelope")
        chunk = self.data[self.offset : self.offset + length]
        self.offset += length
        return chunk

    def take_prefixed(self, width: int) -> bytes:
        return self.take(int.from_bytes(self.take(width), "big"))

    def done(self) -> bool:
        return self.offset == len(self.data)


class CiphertextEnvelope(BaseModel):
    version: int = ENVELOPE_VERSION
    level: Level = Level.ORIGINAL
    recipient_identity: str
    condition_commitment: Annotated[bytes, Field(min_length=32, max_length=32)]
    ephemeral_public: Annotated[bytes, Field(min_length=33, max_length=33)]
    wrapped_key: bytes
    payload: bytes
    auth_tag: Annotated[bytes, Field(min_length=TAG_LENGTH, max_length=TAG_LENGTH)]

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    def to_bytes(self) -> bytes:
        identity = self.recipient_identity.encode("utf-8")
        return b"".join(
            [
                self.version.to_bytes(1, "big"),
                _LEVEL_CODES[self.level].to_bytes(1, "big"),
                len(identity).to_bytes(2, "big"),
                identity,
                self.condition_commitment,
                self.ephemeral_public,
                len(self.wrapped_key).to_bytes(2, "big"),
                self.wrapped_key,
                len(self.payload).to_bytes(4, "big"),
                self.payload,
                self.auth_tag,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CiphertextEnvelope":
        """Parse the binary layout. Any malformation is a decryption failure."""
        try:
            reader = _Reader(data)
            version = reader.take(1)[0]
            if version != ENVELOPE_VERSION:
                raise ValueError(f"unsupported envelope version {version}")
            level = _LEVELS_BY_CODE[reader.take(1)[0]]
            identity = reader.take_prefixed(2).decode("utf-8")
            envelope = cls(
                version=version,
                level=level,
                recipient_identity=identity,
                condition_commitment=reader.take(32),
                ephemeral_public=reader.take(33),
                wrapped_key=reader.take_prefixed(2),
                payload=reader.take_prefixed(4),
                auth_tag=reader.take(TAG_LENGTH),
            )
            if not reader.done():
                raise ValueError("trailing bytes after envelope")
            return envelope
        except (ValueError, KeyError, IndexError):
            raise DecryptionFailedError() from None


def setup(
    security_parameter: int = 128,
    seed: Optional[bytes] = None,
    rng: Rng = os.urandom,
) -> tuple[SystemParams, MasterSecret]:
    hash_name = _hash_name(security_parameter)
    seed = seed if seed is not None else rng(32)
    if len(seed) != 32:
        seed = hashlib.sha256(seed).digest()
    master_secret = MasterSecret(seed=seed, security_parameter=security_parameter)
    master_scalar = _hash_to_scalar(hash_name, b"idchain master", seed)
    params = SystemParams(
        security_parameter=security_parameter,
        hash_name=hash_name,
        master_public=public_bytes(master_scalar),
    )
    logger.info(f"IBCPRE setup with {security_parameter}-bit security ({hash_name})")
    return params, master_secret


def extract(master_secret: MasterSecret, identity: str) -> IdentitySecretKey:
    identity_bytes = _check_identity(identity)
    hash_name = _hash_name(master_secret.security_parameter)
    counter = 0
    while True:
        material = _kdf(
            hash_name,
            master_secret.seed,
            b"idchain identity" + counter.to_bytes(4, "big") + identity_bytes,
        )
        scalar = int.from_bytes(material, "big")
        if is_valid_scalar(scalar):
            break
        counter += 1
    return IdentitySecretKey(
        identity=identity,
        scalar=scalar,
        security_parameter=master_secret.security_parameter,
    )


def publish(params: SystemParams, secret_key: IdentitySecretKey) -> SystemParams:
    """Return params with the identity's public key added to the directory."""
    if secret_key.security_parameter != params.security_parameter:
        raise UnsupportedParameterError(
            "Identity key and system params use different security parameters"
        )
    identity_keys = dict(params.identity_keys)
    identity_keys[secret_key.identity] = secret_key.public_bytes
    return params.model_copy(update={"identity_keys": identity_keys})


def _seal_key(hash_name: str, shared: bytes, commitment: bytes, key: bytes) -> bytes:
    kek = _kdf(hash_name, shared + commitment, b"idchain key wrap")
    # Each wrapping key and content key is used for exactly one message.
    return AESGCM(kek).encrypt(ZERO_NONCE, key, commitment)


def _open_key(
    hash_name: str, shared: bytes, commitment: bytes, wrapped: bytes
) -> bytes:
    kek = _kdf(hash_name, shared + commitment, b"idchain key wrap")
    return AESGCM(kek).decrypt(ZERO_NONCE, wrapped, commitment)


def encrypt(
    params: SystemParams,
    recipient_identity: str,
    condition: Union[ConditionTag, str],
    plaintext: bytes,
    rng: Rng = os.urandom,
) -> CiphertextEnvelope:
    if len(plaintext) > MAX_PLAINTEXT:
        raise PlaintextTooLargeError(
            f"Plaintext of {len(plaintext)} bytes exceeds {MAX_PLAINTEXT} bytes"
        )
    commitment = condition_commitment(condition, recipient_identity)
    recipient_point = point_from_bytes(params.public_key(recipient_identity))
    h_c = _condition_scalar(params.hash_name, condition, recipient_identity)

    r = _random_scalar(rng)
    ephemeral = GENERATOR * ((r * pow(h_c, -1, ORDER)) % ORDER)
    shared = point_to_bytes(recipient_point * r)

    content_key = rng(32)
    wrapped_key = _seal_key(params.hash_name, shared, commitment, content_key)
    sealed = AESGCM(content_key).encrypt(ZERO_NONCE, plaintext, commitment)
    return CiphertextEnvelope(
        level=Level.ORIGINAL,
        recipient_identity=recipient_identity,
        condition_commitment=commitment,
        ephemeral_public=point_to_bytes(ephemeral),
        wrapped_key=wrapped_key,
        payload=sealed[:-TAG_LENGTH],
        auth_tag=sealed[-TAG_LENGTH:],
    )


def _delegation_scalar(
    hash_name: str,
    delegation_point: bytes,
    delegatee_public: bytes,
    agreed: bytes,
    commitment: bytes,
) -> int:
    return _hash_to_scalar(
        hash_name,
        b"idchain delegation",
        delegation_point,
        delegatee_public,
        agreed,
        commitment,
    )


def rkgen(
    params: SystemParams,
    delegator: IdentitySecretKey,
    delegatee_identity: str,
    condition: Union[ConditionTag, str],
    rng: Rng = os.urandom,
) -> ReEncryptionKey:
    _check_identity(delegatee_identity)
    if delegatee_identity == delegator.identity:
        raise SelfDelegationError(
            f"Identity '{delegator.identity}' cannot delegate to itself"
        )
    _condition_bytes(condition)
    if isinstance(condition, str):
        condition = ConditionTag(value=condition)
    commitment = condition_commitment(condition, delegator.identity)
    delegatee_public = params.public_key(delegatee_identity)

    x = _random_scalar(rng)
    delegation_point = public_bytes(x)
    agreed = point_to_bytes(point_from_bytes(delegatee_public) * x)
    d = _delegation_scalar(
        params.hash_name, delegation_point, delegatee_public, agreed, commitment
    )
    h_c = _condition_scalar(params.hash_name, condition, delegator.identity)
    rk = (delegator.scalar * h_c * pow(d, -1, ORDER)) % ORDER
    return ReEncryptionKey(
        delegator_identity=delegator.identity,
        delegatee_identity=delegatee_identity,
        condition=condition,
        security_parameter=params.security_parameter,
        translation_token=scalar_to_bytes(rk) + delegation_point,
    )


def reencrypt(rk: ReEncryptionKey, ct: CiphertextEnvelope) -> CiphertextEnvelope:
    if ct.level is not Level.ORIGINAL:
        raise LevelMismatchError("Only original envelopes can be re-encrypted")
    if ct.recipient_identity != rk.delegator_identity:
        raise IdentityMismatchError(
            f"Envelope is addressed to '{ct.recipient_identity}', "
            f"re-encryption key delegates from '{rk.delegator_identity}'"
        )
    if ct.condition_commitment != rk.commitment:
        raise ConditionMismatchError("Envelope condition does not match the key")
    try:
        ephemeral = point_from_bytes(ct.ephemeral_public)
    except KeyFormatError as e:
        raise ReEncryptionError(f"Malformed ephemeral point: {e}") from e

    translated = point_to_bytes(ephemeral * rk.scalar)
    delegator = rk.delegator_identity.encode("utf-8")
    wrapped_key = (
        rk.delegation_point
        + len(delegator).to_bytes(2, "big")
        + delegator
        + ct.wrapped_key
    )
    return ct.model_copy(
        update={
            "level": Level.REENCRYPTED,
            "recipient_identity": rk.delegatee_identity,
            "ephemeral_public": translated,
            "wrapped_key": wrapped_key,
        }
    )


def _recover_content_key(
    secret_key: IdentitySecretKey,
    ct: CiphertextEnvelope,
    condition: Union[ConditionTag, str],
) -> bytes:
    if ct.recipient_identity != secret_key.identity:
        raise ValueError("envelope addressed to another identity")
    hash_name = secret_key.hash_name
    ephemeral = point_from_bytes(ct.ephemeral_public)

    if ct.level is Level.ORIGINAL:
        commitment = condition_commitment(condition, secret_key.identity)
        if commitment != ct.condition_commitment:
            raise ValueError("condition mismatch")
        h_c = _condition_scalar(hash_name, condition, secret_key.identity)
        shared = point_to_bytes(ephemeral * ((secret_key.scalar * h_c) % ORDER))
        return _open_key(hash_name, shared, commitment, ct.wrapped_key)

    reader = _Reader(ct.wrapped_key)
    delegation_point = reader.take(33)
    delegator = reader.take_prefixed(2).decode("utf-8")
    inner = ct.wrapped_key[reader.offset :]
    commitment = condition_commitment(condition, delegator)
    if commitment != ct.condition_commitment:
        raise ValueError("condition mismatch")
    agreed = point_to_bytes(point_from_bytes(delegation_point) * secret_key.scalar)
    d = _delegation_scalar(
        hash_name, delegation_point, secret_key.public_bytes, agreed, commitment
    )
    shared = point_to_bytes(ephemeral * d)
    return _open_key(hash_name, shared, commitment, inner)


def decrypt(
    secret_key: IdentitySecretKey,
    ct: Union[CiphertextEnvelope, bytes],
    condition: Union[ConditionTag, str],
) -> bytes:
    try:
        if isinstance(ct, bytes):
            ct = CiphertextEnvelope.from_bytes(ct)
        content_key = _recover_content_key(secret_key, ct, condition)
        return AESGCM(content_key).decrypt(
            ZERO_NONCE, ct.payload + ct.auth_tag, ct.condition_commitment
        )
    except (InvalidTag, KeyFormatError, ValueError, DecryptionFailedError):
        raise DecryptionFailedError() from None


class KeyGenerationCenter:
    """Holds the master secret and publishes identity public keys."""

    def __init__(
        self,
        security_parameter: int = 128,
        seed: Optional[bytes] = None,
        rng: Rng = os.urandom,
    ):
        self.params, self._master_secret = setup(security_parameter, seed, rng)

    def register(self, identity: str) -> IdentitySecretKey:
        secret_key = extract(self._master_secret, identity)
        self.params = publish(self.params, secret_key)
        logger.info(f"Published IBCPRE key for identity '{identity}'")
        return secret_key

    def __repr__(self) -> str:
        return (
            f"<KeyGenerationCenter("
            f"security_parameter={self.params.security_parameter}, "
            f"identities={len(self.params.identity_keys)})>"
        )
