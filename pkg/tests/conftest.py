import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    _ACCEPTANCE.append((props["criterion"], props.get("title", ""), report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"{verdict}  criterion {number:>2}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def criterion(request, record_property):
    """Tag a test with its acceptance criterion and let it attach a detail string."""
    mark = request.node.get_closest_marker("criterion")
    number, title = mark.args
    record_property("criterion", number)
    record_property("title", title)

    def detail(text):
        record_property("detail", text)

    return detail
