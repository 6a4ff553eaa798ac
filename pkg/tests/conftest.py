import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    @contextlib.contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            _ACCEPTANCE[number] = (title, False, c.detail or f"{type(exc).__name__}: {exc}".splitlines()[0])
            print(f"ACCEPTANCE {number} FAIL {title} {c.detail}")
            raise
        _ACCEPTANCE[number] = (title, True, c.detail)
        print(f"ACCEPTANCE {number} PASS {title} {c.detail}")
    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}" + (f" ({detail})" if detail else ""))
