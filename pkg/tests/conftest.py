import numpy as np
import pytest

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    status = "PASS" if report.outcome == "passed" else "FAIL"
    _criteria[number] = (title, status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)


@pytest.fixture
def criterion(request, record_property):
    """Tag a test with its acceptance criterion; returns a setter for the detail text."""
    marker = request.node.get_closest_marker("criterion")
    record_property("criterion", marker.args)
    return lambda text: record_property("detail", text)
