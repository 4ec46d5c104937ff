import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from baf.pipeline import compute_stats  # noqa: E402
from baf.surrogate import gen_synthetic_dataset, train_surrogate  # noqa: E402

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def dataset():
    return gen_synthetic_dataset(seed=0)


@pytest.fixture(scope="session")
def trained(dataset):
    """Surrogate network trained once per session; returns (net, seconds spent)."""
    t0 = time.perf_counter()
    net = train_surrogate(dataset, seed=0)
    return net, time.perf_counter() - t0


@pytest.fixture(scope="session")
def net(trained):
    return trained[0]


@pytest.fixture(scope="session")
def stats(net, dataset):
    return compute_stats(net, dataset.train[0][:64])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, seconds, budget, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num}: {title} ({seconds:.1f}s of {budget:.0f}s) {detail}")
