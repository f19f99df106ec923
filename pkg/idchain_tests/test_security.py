import base64
import hashlib
import hmac
import random

import pytest

from idchain.core.security import (
    PasswordRecord,
    TotpReplayGuard,
    TotpSecret,
    hash_password,
    totp_code,
    totp_match,
    totp_verify,
    verify_password,
)
from idchain.exceptions import PasswordPolicyError


RFC_SHA1_KEY = b"12345678901234567890"

# RFC 6238 reference table, SHA-1, 8 digits
RFC_SHA1_ROWS = [
    (59, "94287082"),
    (1111111109, "07081804"),
    (1111111111, "14050471"),
    (1234567890, "89005924"),
    (2000000000, "69279037"),
    (20000000000, "65353130"),
]


def hmac_oracle(key: bytes, unix_time: int, digits: int, step: int = 30) -> str:
    counter = (unix_time // step).to_bytes(8, "big")
    digest = hmac.new(key, counter, hashlib.sha1).digest()
    offset = digest[-1] & 0x0F
    code = int.from_bytes(digest[offset : offset + 4], "big") & 0x7FFFFFFF
    return str(code % 10**digits).zfill(digits)


@pytest.fixture
def rfc_secret() -> TotpSecret:
    return TotpSecret(key=RFC_SHA1_KEY, digits=8, algorithm="sha1", step_seconds=30)


@pytest.fixture
def secret() -> TotpSecret:
    return TotpSecret.generate(rng=random.Random(7).randbytes)


class TestPasswords:
    def test_hello(self):
        assert True

    def test_verify_correct(self):
        record = hash_password("correct horse battery")
        assert verify_password(record, "correct horse battery")

    def test_verify_wrong(self):
        record = hash_password("correct horse battery")
        assert not verify_password(record, "correct horse batteryx")

    def test_salts_give_distinct_digests(self):
        first = hash_password("password123", salt=b"\x01" * 16)
        second = hash_password("password123", salt=b"\x02" * 16)
        assert first.digest != second.digest

    def test_iterations_from_settings(self, settings):
        record = hash_password("password123")
        assert record.iterations == settings.PBKDF2_ITERATIONS
        assert len(record.salt) == 16
        assert len(record.digest) == 32

    def test_digest_matches_pbkdf2(self):
        record = hash_password("password123", salt=b"\x05" * 16, iterations=10_000)
        expected = hashlib.pbkdf2_hmac("sha256", b"password123", b"\x05" * 16, 10_000)
        assert record.digest == expected

    @pytest.mark.parametrize("password", ["", "short", "1234567", "x" * 65])
    def test_policy(self, password):
        with pytest.raises(PasswordPolicyError):
            hash_password(password)

    def test_policy_boundaries(self):
        hash_password("x" * 8)
        hash_password("x" * 64)

    def test_record_rejects_low_iterations(self):
        with pytest.raises(ValueError):
            PasswordRecord(salt=b"\x00" * 16, iterations=9_999, digest=b"\x00" * 32)


class TestTotpCodes:
    @pytest.mark.parametrize("unix_time, expected", RFC_SHA1_ROWS)
    def test_oracle_matches_rfc_table(self, unix_time, expected):
        assert hmac_oracle(RFC_SHA1_KEY, unix_time, 8) == expected

    @pytest.mark.parametrize("unix_time, expected", RFC_SHA1_ROWS)
    def test_rfc_table(self, rfc_secret, unix_time, expected):
        assert totp_code(rfc_secret, unix_time) == expected

    def test_sha256_row(self):
        key = b"12345678901234567890123456789012"
        secret = TotpSecret(key=key, digits=8, algorithm="sha256")
        assert totp_code(secret, 59) == "46119246"

    def test_same_window(self, secret):
        assert totp_code(secret, 0) == totp_code(secret, 29)

    def test_window_counter_changes(self, secret):
        assert secret.counter_at(29) != secret.counter_at(30)

    def test_defaults(self, secret, settings):
        assert len(secret.key) == 20
        assert secret.digits == settings.TOTP_DIGITS
        assert len(totp_code(secret, 1_000)) == secret.digits

    def test_rejects_bad_digits(self):
        with pytest.raises(ValueError):
            TotpSecret(key=RFC_SHA1_KEY, digits=7)

    def test_base32_round_trip(self, secret):
        assert secret.base32 == base64.b32encode(secret.key).decode().rstrip("=")
        assert TotpSecret.from_base32(secret.base32).key == secret.key

    def test_provisioning_uri(self, secret):
        uri = secret.provisioning_uri("alice", issuer="idp-1")
        assert uri.startswith("otpauth://totp/")
        assert "idp-1" in uri

    def test_codes_change_across_windows(self, secret):
        codes = [totp_code(secret, window * 30) for window in range(2_000)]
        changes = sum(a != b for a, b in zip(codes, codes[1:]))
        # expected number of unchanged neighbours is about 0.002
        assert changes >= len(codes) - 3


class TestTotpVerify:
    def test_current_window(self, secret):
        code = totp_code(secret, 1_000_000)
        assert totp_verify(secret, 1_000_000, code)

    def test_skew_window(self, secret):
        code = totp_code(secret, 1_000_000 - 30)
        assert totp_verify(secret, 1_000_000, code)

    def test_outside_skew(self, secret):
        code = totp_code(secret, 1_000_000 - 60)
        assert totp_match(secret, 1_000_000, code) is None
        assert not totp_verify(secret, 1_000_000, code)

    def test_wrong_code(self, secret):
        code = totp_code(secret, 1_000_000)
        wrong = str((int(code) + 1) % 10**secret.digits).zfill(secret.digits)
        assert not totp_verify(secret, 1_000_000, wrong)

    def test_malformed_code(self, secret):
        assert not totp_verify(secret, 1_000_000, "abc")

    def test_replay_rejected(self, secret):
        guard = TotpReplayGuard()
        code = totp_code(secret, 1_000_000)
        assert totp_verify(secret, 1_000_000, code, guard=guard, username="alice")
        assert not totp_verify(secret, 1_000_001, code, guard=guard, username="alice")

    def test_replay_guard_is_per_user(self, secret):
        guard = TotpReplayGuard()
        code = totp_code(secret, 1_000_000)
        assert totp_verify(secret, 1_000_000, code, guard=guard, username="alice")
        assert totp_verify(secret, 1_000_000, code, guard=guard, username="bob")

    def test_replay_guard_rejects_every_resubmission(self, secret):
        guard = TotpReplayGuard()
        for window in range(100):
            now = 1_000_000 + window * 30
            code = totp_code(secret, now)
            assert totp_verify(secret, now, code, guard=guard, username="alice")
            assert not totp_verify(secret, now, code, guard=guard, username="alice")
        assert len(guard.export_state()) == 100
