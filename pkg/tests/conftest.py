"""Shared test plumbing: fixture paths and the acceptance verdict report."""
from __future__ import annotations

import pathlib

import pytest

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
SCENES = pathlib.Path(__file__).parent.parent / "src" / "depthgrid" / "scenes"

# criterion number -> (short name, passed). Filled by tests/test_acceptance.py
# through record_acceptance; echoed once at the end of the run so every
# criterion gets exactly one PASS/FAIL line whatever else pytest prints.
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str = "") -> None:
    """Register a criterion verdict, print its line, and assert it."""
    ACCEPTANCE_RESULTS[number] = (name, bool(passed))
    line = f"ACCEPTANCE {number}: {name}: {'PASS' if passed else 'FAIL'}"
    print(line)
    assert passed, detail or line


@pytest.fixture
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed = ACCEPTANCE_RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {name}: {verdict}")
