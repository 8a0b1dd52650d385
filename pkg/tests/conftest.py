import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facelivt.model import build_calibrated, variant  # noqa: E402
from facelivt.reparam import fuse_weights  # noqa: E402


@pytest.fixture(scope="session")
def xs_train():
    return build_calibrated(variant("XS"), seed=0)


@pytest.fixture(scope="session")
def xs_deploy(xs_train):
    return fuse_weights(xs_train)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """Store the one-line verdict of an acceptance criterion for the end-of-run summary."""
    def _record(number: int, title: str, ok, detail: str):
        status = {True: "PASS", False: "FAIL", None: "N/A"}[ok]
        ACCEPTANCE_LINES[number] = f"criterion {number:2d} [{status}] {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
