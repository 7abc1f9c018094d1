from pathlib import Path

import numpy as np
import pytest

from ldppoison.data import load_idx

ROOT = Path(__file__).resolve().parents[1]
MNIST_IMAGES = ROOT / "data" / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = ROOT / "data" / "mnist5k-labels-idx1-ubyte.gz"


@pytest.fixture(scope="session")
def mnist5k():
    return load_idx(MNIST_IMAGES, MNIST_LABELS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
