import re

import numpy as np
import pytest

ACCEPTANCE = {}
_NAMES = {
    1: "EP exactness in one dimension",
    2: "EP against Monte Carlo oracles",
    3: "involution and fast path",
    4: "M-step exactness",
    5: "end-to-end recovery",
    6: "scalability",
    7: "identification invariance",
    8: "determinism",
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance():
    """Record the outcome of an acceptance criterion: ``record(k, ok, detail)``."""

    def record(k, ok, detail):
        ACCEPTANCE[k] = (bool(ok), detail)
        return ok

    return record


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d)", report.nodeid)
    if match and report.when == "call":
        k = int(match.group(1))
        if k not in ACCEPTANCE:
            ACCEPTANCE[k] = (False, f"did not complete ({report.outcome})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} ({_NAMES[k]}): {'PASS' if ok else 'FAIL'}  {detail}")
