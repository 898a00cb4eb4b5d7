from __future__ import annotations

import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records an acceptance verdict."""

    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[n] = (bool(ok), title, detail)
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}")
