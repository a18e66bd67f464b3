import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion and print it."""
    lines = request.config.stash[_LINES]

    def record(criterion, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[str(criterion)] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
