import numpy as np
import pytest
from hypothesis import settings

from splitfp import data

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


def pytest_configure(config):
    config.addinivalue_line("markers", "mnist: needs the MNIST IDX files")
    config.addinivalue_line("markers", "slow: long-running experiment")


def mnist_available() -> bool:
    d = data.default_data_dir()
    return all((d / f).exists() for pair in data.MNIST_FILES.values() for f in pair)


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found "
                                 f"(set {data.DATA_DIR_ENV})")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def blobs():
    return data.synth_dataset(40, 4, 16, seed=3)


@pytest.fixture(scope="session")
def tiny_cnn_spec():
    # 6 layers: conv relu pool flatten dense softmax
    from splitfp.engine import ModelSpec
    return ModelSpec((6, 6, 1), [
        {"kind": "conv2d", "in_channels": 1, "out_channels": 3, "kernel": 3, "stride": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "in": 12, "out": 4},
        {"kind": "softmax"},
    ])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
