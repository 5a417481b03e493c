import xpbi  # noqa: F401  (sizes the numba thread pool before anything else imports numba)
import pytest

_LINES = {}


@pytest.fixture
def record():
    """Store one summary line per acceptance criterion."""
    def _record(number, passed, detail):
        _LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_LINES):
        terminalreporter.write_line(_LINES[k])
