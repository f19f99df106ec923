import os
import random

import pytest

from idchain.core.config import settings, TestAppSettings


# IDCHAIN_CONFIG is set using pytest-env plugin in pyproject.toml, but overwritten in
# idchain_tests/__init__.py
assert (
    os.environ.get("IDCHAIN_CONFIG") == "testing"
), "IDCHAIN_CONFIG is not set to 'testing'"


test_settings = settings


@pytest.fixture(scope="session")
def settings() -> TestAppSettings:
    """Fixture for test settings."""
    print(f"{test_settings = }")
    return test_settings


@pytest.fixture
def rng():
    """Seeded byte source for reproducible encryption randomness."""
    return random.Random(1234).randbytes
