import sys
from pathlib import Path

import pytest

from geofaas.harness.simnet import run_virtual


@pytest.fixture
def vrun():
    """Run a coroutine on the virtual clock."""
    return run_virtual


def pytest_configure(config):
    # tests import helpers from each other's modules by plain name
    sys.path.insert(0, str(Path(__file__).parent))
