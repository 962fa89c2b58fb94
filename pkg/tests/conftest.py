"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient fidelity on the tiny model",
    2: "permutation equivariance",
    3: "device and antenna count adaptability",
    4: "coordinate-descent correctness",
    5: "Sherman-Morrison drift",
    6: "statistical covariance model",
    7: "desk-scale detection quality",
    8: "timing ordering and linear growth",
    9: "loss reduction at ratio 1/2",
    10: "metric exactness and ROC monotonicity",
}

_outcomes: dict = {}
_notes: list = []


@pytest.fixture
def note(request):
    """Record a measured value for the acceptance summary."""
    marker = request.node.get_closest_marker("criterion")
    prefix = f"criterion {marker.args[0]:2d}" if marker else request.node.name
    return lambda text: _notes.append(f"{prefix}: {text}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        status = "FAIL" if "failed" in results else "SKIP" if set(results) == {"skipped"} else "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {CRITERIA.get(n, '')}")
    if _notes:
        terminalreporter.section("acceptance measurements")
        for line in _notes:
            terminalreporter.write_line(line)
