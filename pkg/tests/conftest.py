import contextlib

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_LINES]

    @contextlib.contextmanager
    def run(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            line = f"criterion {number} FAIL  {title}: {reason}"
            lines.append(line)
            print(line)
            raise
        line = f"criterion {number} PASS  {title}" + (f": {'; '.join(notes)}" if notes else "")
        lines.append(line)
        print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
