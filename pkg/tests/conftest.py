import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion.

    ``criterion(n, ok, detail)`` stores the line and returns ``ok`` so the
    test can assert on it afterwards.
    """
    def record(n: int, ok: bool, detail: str) -> bool:
        _LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(_LINES[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
