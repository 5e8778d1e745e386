from pathlib import Path

import pytest
from hypothesis import settings

ROOT = Path(__file__).resolve().parents[1]
MNIST = ROOT / "data" / "mnist"
DIGITS = ROOT / "data" / "digits"

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def mnist_paths():
    return {
        "train_images": str(MNIST / "train-images-idx3-ubyte.gz"),
        "train_labels": str(MNIST / "train-labels-idx1-ubyte.gz"),
        "test_images": str(MNIST / "t10k-images-idx3-ubyte.gz"),
        "test_labels": str(MNIST / "t10k-labels-idx1-ubyte.gz"),
    }


def digits_paths():
    return {
        "train_images": str(DIGITS / "train-images-idx3-ubyte.gz"),
        "train_labels": str(DIGITS / "train-labels-idx1-ubyte.gz"),
        "test_images": str(DIGITS / "t10k-images-idx3-ubyte.gz"),
        "test_labels": str(DIGITS / "t10k-labels-idx1-ubyte.gz"),
    }


@pytest.fixture(scope="session")
def mnist():
    if not (MNIST / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST files not present under data/mnist")
    return mnist_paths()


@pytest.fixture(scope="session")
def digits():
    if not (DIGITS / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("digits IDX files not present; run scripts/prepare_data.py")
    return digits_paths()


VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, shown in the terminal summary."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        VERDICTS.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
