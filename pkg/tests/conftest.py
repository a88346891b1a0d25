import re

import numpy as np
import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


@pytest.fixture
def rng():
    return np.random.default_rng(20251019)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call" and outcome != "error":
                continue
            m = _CRITERION.search(report.nodeid)
            if m:
                lines.append((int(m.group(1)), m.group(2), "PASS" if outcome == "passed" else "FAIL"))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, verdict in sorted(lines):
        terminalreporter.write_line(f"[{verdict}] criterion {num:2d}: {name.replace('_', ' ')}")
