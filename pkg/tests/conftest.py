import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splitsr.harness import desk_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_s0(tmp_path_factory):
    """16 S0 x2 pairs for training (seed 1) and 8 held-out pairs (seed 2)."""
    root = tmp_path_factory.mktemp("desk_s0")
    return desk_dataset(root / "train", 16, ("S0",), 2, seed=1), desk_dataset(root / "test", 8, ("S0",), 2, seed=2)


@pytest.fixture(scope="session")
def desk_mixed(tmp_path_factory):
    """16 x2 pairs cycling through S0..S3, with degradation vectors."""
    root = tmp_path_factory.mktemp("desk_mixed")
    return desk_dataset(root, 16, ("S0", "S1", "S2", "S3"), 2, seed=3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    lines = [RESULTS[k] for k in sorted(k for k in RESULTS if isinstance(k, int))]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
