import os
from typing import Annotated, Callable, Literal, Optional

from passlib.crypto.digest import pbkdf2_hmac
from passlib.exc import TokenError
from passlib.totp import TOTP
from passlib.utils import consteq
from pydantic import BaseModel, ConfigDict, Field

from idchain.core.config import settings
from idchain.exceptions import PasswordPolicyError


PASSWORD_DIGEST = "sha256"
SALT_LENGTH = 16
TOTP_SECRET_LENGTH = 20


class PasswordRecord(BaseModel):
    salt: Annotated[bytes, Field(min_length=SALT_LENGTH, max_length=SALT_LENGTH)]
    iterations: int = Field(ge=10_000)
    digest: Annotated[bytes, Field(min_length=32, max_length=32)]

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


def check_password_policy(password: str) -> None:
    min_length, max_length = settings.PASSWORD_MIN_LENGTH, settings.PASSWORD_MAX_LENGTH
    if not min_length <= len(password) <= max_length:
        raise PasswordPolicyError(
            f"Password must be between {min_length} and {max_length} characters"
        )


def hash_password(
    password: str,
    salt: Optional[bytes] = None,
    iterations: Optional[int] = None,
    rng: Callable[[int], bytes] = os.urandom,
) -> PasswordRecord:
    check_password_policy(password)
    salt = salt if salt is not None else rng(SALT_LENGTH)
    iterations = iterations or settings.PBKDF2_ITERATIONS
    digest = pbkdf2_hmac(PASSWORD_DIGEST, password.encode("utf-8"), salt, iterations)
    return PasswordRecord(salt=salt, iterations=iterations, digest=digest)


def verify_password(record: PasswordRecord, candidate: str) -> bool:
    digest = pbkdf2_hmac(
        PASSWORD_DIGEST, candidate.encode("utf-8"), record.salt, record.iterations
    )
    return consteq(digest, record.digest)


class TotpSecret(BaseModel):
    key: Annotated[bytes, Field(min_length=16, max_length=64)]
    step_seconds: int = Field(
        default_factory=lambda: settings.TOTP_STEP_SECONDS, gt=0
    )
    digits: Literal[6, 8] = Field(default_factory=lambda: settings.TOTP_DIGITS)
    skew_windows: int = Field(
        default_factory=lambda: settings.TOTP_SKEW_WINDOWS, ge=0
    )
    algorithm: Literal["sha1", "sha256", "sha512"] = Field(
        default_factory=lambda: settings.TOTP_ALGORITHM
    )

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    @classmethod
    def generate(
        cls, rng: Callable[[int], bytes] = os.urandom, **kwargs
    ) -> "TotpSecret":
        return cls(key=rng(TOTP_SECRET_LENGTH), **kwargs)

    @classmethod
    def from_base32(cls, text: str, **kwargs) -> "TotpSecret":
        return cls(key=TOTP(key=text, format="base32").key, **kwargs)

    def as_totp(self) -> TOTP:
        return TOTP(
            key=self.key,
            format="raw",
            digits=self.digits,
            alg=self.algorithm,
            period=self.step_seconds,
        )

    @property
    def base32(self) -> str:
        return self.as_totp().base32_key

    def provisioning_uri(self, username: str, issuer: str) -> str:
        return self.as_totp().to_uri(label=username, issuer=issuer)

    def counter_at(self, unix_time: int) -> int:
        return int(unix_time) // self.step_seconds


def totp_code(secret: TotpSecret, unix_time: int) -> str:
    if unix_time < 0:
        raise ValueError("unix_time must be non-negative")
    return secret.as_totp().generate(time=unix_time).token


class TotpReplayGuard:
    """Accepts each (username, window counter) at most once."""

    def __init__(self):
        self._used: set[tuple[str, int]] = set()

    def seen(self, username: str, counter: int) -> bool:
        return (username, counter) in self._used

    def record(self, username: str, counter: int) -> None:
        self._used.add((username, counter))

    def export_state(self) -> list[list]:
        return sorted([username, counter] for username, counter in self._used)


def totp_match(secret: TotpSecret, unix_time: int, code: str) -> Optional[int]:
    """Return the matched window counter, or None."""
    try:
        match = secret.as_totp().match(
            code, time=unix_time, window=secret.step_seconds * secret.skew_windows
        )
    except (TokenError, ValueError):
        return None
    return match.counter


def totp_verify(
    secret: TotpSecret,
    unix_time: int,
    code: str,
    guard: Optional[TotpReplayGuard] = None,
    username: str = "",
) -> bool:
    counter = totp_match(secret, unix_time, code)
    if counter is None:
        return False
    if guard is not None:
        if guard.seen(username, counter):
            return False
        guard.record(username, counter)
    return True
