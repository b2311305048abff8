import gzip
import io
import os
import subprocess
import sys
import zipfile
from pathlib import Path

import numpy as np
import pytest

from surnn.tasks import write_idx

MLXTEND_WHEEL = "mlxtend==0.24.0"
MNIST_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
CACHE = Path(os.environ.get("SURNN_CACHE", Path.home() / ".cache" / "surnn"))


def _mnist_rows() -> np.ndarray:
    """The 5000-image MNIST subset bundled in the mlxtend wheel (pixels then label)."""
    wheel_dir = CACHE / "wheels"
    wheels = sorted(wheel_dir.glob("mlxtend-*.whl")) if wheel_dir.exists() else []
    if not wheels:
        wheel_dir.mkdir(parents=True, exist_ok=True)
        subprocess.run([sys.executable, "-m", "pip", "download", MLXTEND_WHEEL, "--no-deps",
                        "-q", "-d", str(wheel_dir)], check=True)
        wheels = sorted(wheel_dir.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheels[-1]) as z, z.open(MNIST_MEMBER) as f:
        text = io.TextIOWrapper(gzip.open(f))
        return np.loadtxt(text, delimiter=",", dtype=np.int64)


@pytest.fixture(scope="session")
def mnist_idx_dir():
    """IDX files built from the subset: a seeded stratified split into 4000 training
    and 1000 test images (400 and 100 per class), each shuffled.

    Set SURNN_MNIST_DIR to a directory holding the four standard IDX files to
    use real MNIST instead.
    """
    env = os.environ.get("SURNN_MNIST_DIR")
    if env:
        return Path(env)
    out = CACHE / "mnist5k_idx_v2"
    names = ["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
             "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"]
    if not all((out / n).exists() for n in names):
        rows = _mnist_rows()  # stored sorted by label
        images = rows[:, :784].reshape(-1, 28, 28).astype(np.uint8)
        labels = rows[:, 784].astype(np.uint8)
        rng = np.random.default_rng(0)
        train, test = [], []
        for c in range(10):
            idx = rng.permutation(np.flatnonzero(labels == c))
            cut = len(idx) * 4 // 5
            train.append(idx[:cut])
            test.append(idx[cut:])
        train = rng.permutation(np.concatenate(train))
        test = rng.permutation(np.concatenate(test))
        out.mkdir(parents=True, exist_ok=True)
        write_idx(out / names[0], images[train])
        write_idx(out / names[1], labels[train])
        write_idx(out / names[2], images[test])
        write_idx(out / names[3], labels[test])
    return out


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, printed in the summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
