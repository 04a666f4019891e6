import numpy as np
import pytest

from htmnet.autodiff import precision
from htmnet.config import tiny_run_config
from htmnet.synth import dataset, write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode."""
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Eight 64 x 64 scenes written to disk once per session."""
    root = tmp_path_factory.mktemp("data")
    write_dataset(str(root), dataset(0, 8, 64))
    return str(root)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criteria lines at the end of the run."""
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
