import numpy as np
import pytest

from shpeft.data import DatasetHandle
from shpeft.models import ModelSpec, build_model


def tiny_mlp(features=2, width=2, classes=2, seed=0, dtype=np.float64):
    """The 12-parameter net used by the oracle tests."""
    return build_model(ModelSpec(family="mlp", features=features, depth=1, width=width,
                                 classes=classes, seed=seed), dtype=dtype)


def random_dataset(n, features, classes, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return DatasetHandle(rng.standard_normal((n, features)).astype(dtype), rng.integers(0, classes, n), classes)


@pytest.fixture
def mlp():
    return tiny_mlp()


# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
