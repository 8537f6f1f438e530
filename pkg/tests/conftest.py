import sys
import textwrap
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture
def child(tmp_path):
    """Write a throwaway simulator script; returns the command that runs it."""

    def make(body: str, name: str = "sim.py"):
        path = tmp_path / name
        path.write_text("import json, sys, time\n" + textwrap.dedent(body))
        return [sys.executable, str(path)]

    return make


ACCEPTANCE_LINES = []


def verdict(number: int, title: str, ok: bool, detail: str):
    """Record and print one acceptance line, then fail the test if ``ok`` is false."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
