import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if rep.when != "call" and outcome == "passed":
                continue
            props = dict(getattr(rep, "user_properties", []))
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            number, _, label = name.partition("_")
            status = "PASS" if outcome == "passed" else "FAIL"
            detail = props.get("detail", "")
            lines[int(number)] = (f"{status} criterion {int(number):2d} "
                                  f"({label.replace('_', ' ')}): {detail}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
