import os
from importlib.util import find_spec

if find_spec("pytest") is None:
    raise ImportError(
        "The 'idchain_tests' package requires additional dependencies. "
        "Please install them using 'pip install idchain[tests]'."
    )

os.environ["IDCHAIN_CONFIG"] = "testing"

from idchain_tests.conftest import test_settings  # noqa: E402

__all__ = ["test_settings"]
