from __future__ import annotations

import pytest

from reflectplan.network import load_network

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> str:
    """Remember a criterion verdict and return its one-line summary."""
    ACCEPTANCE[number] = (name, ok, detail)
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {name} ({detail})")


@pytest.fixture(scope="session")
def net():
    return load_network()
