import os
import tempfile

import pytest

# keep the oracle cache out of the user's home during tests
os.environ.setdefault("ACP_CACHE_DIR", os.path.join(tempfile.gettempdir(), "acpshift-test-cache"))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    def _report(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
