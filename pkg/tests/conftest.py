import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cribriform.network import Network, NetworkConfig  # noqa: E402

# Acceptance lines collected by tests/test_acceptance.py, printed at the end of the run.
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = NetworkConfig(widths=(4, 8), se_reduction=2, input_size=16, downsample=(2,))


@pytest.fixture
def tiny_net():
    return Network(TINY, seed=3)
