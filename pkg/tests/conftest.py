import os
import tempfile

import numpy as np
import pytest

# keep the RHS cache out of the user's home and shared across the session
_CACHE = tempfile.mkdtemp(prefix="oscidal-test-cache-")
os.environ["OSCIDAL_CACHE_DIR"] = _CACHE

ACCEPTANCE = {}


def record(number, ok, detail):
    """Store one acceptance-criterion outcome for the terminal summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
