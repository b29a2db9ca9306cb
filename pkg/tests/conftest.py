import logging

import pytest

from helpers import speed_table

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def table():
    return speed_table()


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("hetfl").setLevel(logging.ERROR)
    yield


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
