import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("LSNET_TEST_THREADS", "1")))


def random_segments(rng, n, size, min_len=0.0):
    out = []
    while len(out) < n:
        s = rng.uniform(0, size, 4)
        if np.hypot(s[2] - s[0], s[3] - s[1]) > min_len:
            out.append(s)
    return np.array(out).reshape(-1, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_records():
    from lsnet.synthdata import generate_records

    return generate_records(6, 77, size=64)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/INCONCLUSIVE line for the end-of-run summary."""

    def record(criterion, status, detail):
        line = f"[{status}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
