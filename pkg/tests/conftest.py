import numpy as np
import pytest

from ichseg.volume_io import SyntheticSpec, write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six tiny synthetic cases on disk (32x32x6)."""
    out = tmp_path_factory.mktemp("small_data")
    return write_synthetic_dataset(out, 6, SyntheticSpec(shape=(32, 32, 6), n_lesions=2), seed=7)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
