import os
from pathlib import Path

import pytest

DEFAULT_DATA_DIRS = [os.environ.get("MNIST_DIR", ""), "/root/data/mnist", "~/data/mnist", "data/mnist"]


def _find_mnist():
    for d in DEFAULT_DATA_DIRS:
        if not d:
            continue
        p = Path(os.path.expanduser(d))
        if (p / "train-images-idx3-ubyte").exists() or (p / "train-images-idx3-ubyte.gz").exists():
            return p
    return None


MNIST_DIR = _find_mnist()


@pytest.fixture(scope="session")
def mnist_dir():
    if MNIST_DIR is None:
        pytest.skip("MNIST IDX files not found; set MNIST_DIR")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    from reduced_precision.data import load_mnist

    return load_mnist(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    from reduced_precision.data import load_mnist

    return load_mnist(mnist_dir, "test")


ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion for the end-of-run summary."""

    def record(number, name, ok, detail=""):
        ACCEPTANCE_RESULTS[number] = (name, bool(ok), detail)
        print(f"[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{number:>2}. {'PASS' if ok else 'FAIL'}  {name}  ({detail})")
