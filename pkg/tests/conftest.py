import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "60")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class AcceptanceReport:
    """One PASS/FAIL line per acceptance criterion, printed after the run."""

    def __init__(self):
        self.rows = {}

    def add(self, number, checks):
        ok, details = self.rows.get(number, (True, []))
        for label, passed, detail in checks:
            ok = ok and passed
            details.append(f"{label}={'ok' if passed else 'FAIL'}" + (f" ({detail})" if detail else ""))
        self.rows[number] = (ok, details)

    def lines(self):
        for n in sorted(self.rows):
            ok, details = self.rows[n]
            yield f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(details)


_REPORT = AcceptanceReport()


@pytest.fixture(scope="session")
def acceptance():
    return _REPORT


def pytest_terminal_summary(terminalreporter):
    if _REPORT.rows:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT.lines():
            terminalreporter.write_line(line)
