from __future__ import annotations

import pytest

from spotprobe.simulator import default_pools, run_scenario

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(scope="session")
def default_bundle():
    """Reference scenario: 20 pools, 24 h, 3-minute cycles, N = 10, seed 7."""
    return run_scenario(default_pools(20), 1440, 3, 10, seed=7)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {name}: {detail}")
