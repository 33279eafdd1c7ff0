import contextlib
import sys
from pathlib import Path

import pytest

# the finite-difference helper lives next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class Recorder:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def note(self, text: str) -> None:
        self.detail = text


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records pass/fail of one acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        rec = Recorder(number, title)
        try:
            yield rec
        except BaseException:
            _CRITERIA[number] = (title, False, rec.detail)
            raise
        _CRITERIA[number] = (title, True, rec.detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
