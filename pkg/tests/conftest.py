from __future__ import annotations

import numpy as np
import pytest

from erclm.eval_harness import reference_mode

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def frontal_mode():
    """Shape-only frontal mode trained on 200 procedural faces."""
    return reference_mode(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Record one acceptance criterion; printed as PASS/FAIL at the end of the run."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _VERDICTS.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
