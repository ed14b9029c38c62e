"""Shared fixtures: a per-session verdict board for the acceptance criteria."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record ``(criterion, ok, detail)`` and print a one-line outcome."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
