import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """Small toy corpus shared by data, model, and CLI tests."""
    from m3p.toydata import generate_toy_corpus

    out = tmp_path_factory.mktemp("toy")
    generate_toy_corpus(out, langs=3, size=24, img=16, patch=8, seed=5, test_size=6)
    return out


@pytest.fixture(scope="session")
def toy_sets(toy_dir):
    from m3p.toydata import load_toy_splits

    return load_toy_splits(toy_dir, 8)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=1234))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
