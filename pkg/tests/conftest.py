import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    props = dict(item.user_properties)
    if rep.failed:
        status = "FAIL"
    elif props.get("soft_fail"):
        status = "FAIL (soft)"
    else:
        status = "PASS"
    item.config.acceptance[mark.args[0]] = (mark.args[1], status, rep.duration, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status, seconds, detail = results[n]
        line = f"{status:<11} {n:>2}. {title} [{seconds:.1f} s]"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
