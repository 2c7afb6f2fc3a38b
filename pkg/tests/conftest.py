"""Collects the per-criterion verdicts of the acceptance suite and prints them at the end."""

import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one line for criterion ``n``.

    A criterion checked by several tests passes only if every part passes.
    """

    def record(criterion: int, ok: bool, detail: str) -> bool:
        prev_ok, prev_detail = _VERDICTS.get(criterion, (True, ""))
        _VERDICTS[criterion] = (prev_ok and ok, f"{prev_detail}; {detail}" if prev_detail else detail)
        print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_VERDICTS):
        ok, detail = _VERDICTS[criterion]
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
