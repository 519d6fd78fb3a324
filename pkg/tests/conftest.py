import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("CSTRAIN_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images.idx3-ubyte",
    "train_labels": "train-labels.idx1-ubyte",
    "test_images": "t10k-images.idx3-ubyte",
    "test_labels": "t10k-labels.idx1-ubyte",
}


def write_idx(path, array, magic, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    payload = struct.pack(">i", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += array.tobytes()
    if compress:
        payload = gzip.compress(payload)
    Path(path).write_bytes(payload)
    return Path(path)


def write_mnist_like(directory, images, labels, prefix="train", compress=False):
    directory = Path(directory)
    ext = ".gz" if compress else ""
    img = write_idx(directory / f"{prefix}-images{ext}", images, 2051, compress)
    lab = write_idx(directory / f"{prefix}-labels{ext}", labels, 2049, compress)
    return img, lab


@pytest.fixture
def tiny_mnist(tmp_path):
    """60 random 28x28 training images and 30 test images, 10 balanced classes."""
    rng = np.random.default_rng(123)
    train = write_mnist_like(tmp_path, rng.integers(0, 256, (60, 28, 28)),
                             np.repeat(np.arange(10), 6), "train")
    test = write_mnist_like(tmp_path, rng.integers(0, 256, (30, 28, 28)),
                            np.repeat(np.arange(10), 3), "test")
    return {"train_images": str(train[0]), "train_labels": str(train[1]),
            "test_images": str(test[0]), "test_labels": str(test[1]), "dir": tmp_path}


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {k: MNIST_DIR / v for k, v in MNIST_FILES.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        pytest.skip(f"MNIST IDX files not found (set CSTRAIN_MNIST_DIR): {missing}")
    return {k: str(v) for k, v in paths.items()}


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        status = {"passed": "PASS", "failed": "FAIL"}.get(report.outcome, "SKIP")
        if name not in _CRITERIA or status != "PASS":
            _CRITERIA[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        number, _, label = name.removeprefix("test_criterion_").partition("_")
        line = f"{status} criterion {int(number):>2} {label.replace('_', ' ')}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
