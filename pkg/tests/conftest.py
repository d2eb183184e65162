import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from desmoke.smokesim import build_dataset, write_scenes  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pair(rng, shape, noise=0.15):
    ref = rng.random(shape)
    test = np.clip(ref + noise * rng.standard_normal(shape), 0.0, 1.0)
    return ref, test


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 procedural 64x64 scenes with three smoke densities each."""
    root = tmp_path_factory.mktemp("small")
    write_scenes(root / "clean", 10, 64, seed=3)
    return build_dataset(root / "clean", root / "data", seed=3)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(acceptance_log.RESULTS[number])
