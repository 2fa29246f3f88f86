import contextlib

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion.

    Usage: ``with criterion(3, "title") as notes: ...``; strings appended to
    ``notes`` are shown next to the verdict in the terminal summary.
    """
    @contextlib.contextmanager
    def run(number, title):
        notes = []
        try:
            yield notes
        except BaseException:
            _RESULTS[number] = ("FAIL", title, notes)
            raise
        _RESULTS[number] = ("PASS", title, notes)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_RESULTS):
        verdict, title, notes = _RESULTS[number]
        detail = f" [{'; '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}{detail}")
