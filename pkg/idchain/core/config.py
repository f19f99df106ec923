import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


logging.info("Loading config.py")


DEFAULT_SOURCE_WEIGHTS: dict[str, float] = {
    "government": 0.95,
    "credit_bureau": 0.85,
    "delivery": 0.70,
    "social": 0.50,
    "other": 0.50,
}


class AppSettings(BaseSettings):
    TITLE: str = "idchain"
    VERSION: str = "0.0.3"

    # Key derivation settings
    DEFAULT_KEY_MODE: Literal["additive", "multiplicative"] = Field(
        default="multiplicative", validation_alias="IDCHAIN_KEY_MODE"
    )

    # Credential settings
    PBKDF2_ITERATIONS: int = Field(default=100_000, ge=10_000)
    PASSWORD_MIN_LENGTH: int = 8
    PASSWORD_MAX_LENGTH: int = 64
    TOTP_STEP_SECONDS: int = 30
    TOTP_DIGITS: Literal[6, 8] = 6
    TOTP_SKEW_WINDOWS: int = 1
    TOTP_ALGORITHM: Literal["sha1", "sha256", "sha512"] = "sha1"

    # Trust settings
    TRUST_SOURCE_WEIGHTS: dict[str, float] = DEFAULT_SOURCE_WEIGHTS
    TRUST_HALF_LIFE_DAYS: float = 180.0
    TRUST_UNAVAILABILITY_PENALTY: float = 0.5
    TRUST_STALENESS_FACTOR: float = 0.9

    @field_validator("TRUST_SOURCE_WEIGHTS")
    @classmethod
    def check_source_weights(cls, value: dict[str, float]) -> dict[str, float]:
        for source_class, weight in value.items():
            if not 0.0 < weight <= 1.0:
                raise ValueError(
                    f"Weight for source class '{source_class}' must be in (0, 1], "
                    f"got {weight}"
                )
        return value

    @field_validator("TRUST_HALF_LIFE_DAYS")
    @classmethod
    def check_half_life(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("TRUST_HALF_LIFE_DAYS must be positive")
        return value

    @field_validator("TRUST_UNAVAILABILITY_PENALTY", "TRUST_STALENESS_FACTOR")
    @classmethod
    def check_factor(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"Trust factors must be in (0, 1], got {value}")
        return value

    # Ledger settings
    LEDGER_GAP_LIMIT: int = Field(default=20, ge=1)
    LEDGER_FORMAT_VERSION: int = 1

    # Network simulator settings
    NETSIM_MAX_STEPS: int = Field(default=100_000, ge=1)
    NETSIM_HISTORY_LIMIT: int = Field(default=1_024, ge=1)

    # Scenario runner settings
    SCENARIO_SCHEMA_VERSION: int = 1
    OUTPUT_DIR: Path = Field(
        default=Path("idchain-out"), validation_alias="IDCHAIN_OUTPUT_DIR"
    )

    @property
    def half_life_seconds(self) -> float:
        return self.TRUST_HALF_LIFE_DAYS * 86_400

    model_config = SettingsConfigDict(
        case_sensitive=True, env_file=".env", env_file_encoding="utf-8", extra="allow"
    )


class DevelopmentAppSettings(AppSettings):
    pass


class TestAppSettings(AppSettings):
    # Keep password hashing fast in tests; still at the policy floor.
    PBKDF2_ITERATIONS: int = Field(default=10_000, ge=10_000)
    OUTPUT_DIR: Path = Field(
        default=Path("idchain-test-out"), validation_alias="IDCHAIN_TEST_OUTPUT_DIR"
    )


@lru_cache()
def get_settings():
    config_cls_dict = {
        "development": DevelopmentAppSettings,
        "testing": TestAppSettings,
    }
    config_name = os.environ.get("IDCHAIN_CONFIG", "development")
    config_cls = config_cls_dict[config_name]
    return config_cls()


settings = get_settings()
