import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {}
EXPECTED = range(1, 12)


@pytest.fixture
def criterion():
    """record(number, ok, detail): one summary line per acceptance criterion."""

    def record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in EXPECTED:
        ok, detail = CRITERIA.get(k, (False, "not run or errored before recording"))
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
