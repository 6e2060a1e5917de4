import sys
from pathlib import Path

import numpy as np
import pytest

from afa import tensor as T

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
CIFAR_DIR = ROOT / "data" / "cifar-10-batches-bin"

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_paths():
    return {
        "train_images": MNIST_DIR / "train-images-idx3-ubyte.gz",
        "train_labels": MNIST_DIR / "train-labels-idx1-ubyte.gz",
        "test_images": MNIST_DIR / "t10k-images-idx3-ubyte.gz",
        "test_labels": MNIST_DIR / "t10k-labels-idx1-ubyte.gz",
    }


def have_mnist() -> bool:
    return all(p.exists() for p in mnist_paths().values())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number:2d}: {status}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
