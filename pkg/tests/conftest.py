import os
from pathlib import Path

import pytest
import torch

from vcae import data as vdata


def _mnist_root():
    for cand in (os.environ.get(vdata.DATA_ROOT_ENV), "/root/data", "data"):
        if cand and (Path(cand) / "mnist" / "train-images-idx3-ubyte").exists() or (
                cand and (Path(cand) / "mnist" / "train-images-idx3-ubyte.gz").exists()):
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_root():
    root = _mnist_root()
    if root is None:
        pytest.skip("MNIST IDX files not found (set VCAE_DATA_ROOT)")
    return root


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion (echoed in the terminal summary)."""
    lines = request.config.stash[ACCEPTANCE]

    def record(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
