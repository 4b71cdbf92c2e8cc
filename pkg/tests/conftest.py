import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from moesim import SynthesisConfig, default_hardware, default_model_spec, generate_trace  # noqa: E402

_acceptance_lines = []


@pytest.fixture(scope="session")
def default_spec():
    return default_model_spec()


@pytest.fixture(scope="session")
def default_trace(default_spec):
    return generate_trace(default_spec, SynthesisConfig())


@pytest.fixture(scope="session")
def default_hw(default_spec):
    return default_hardware(default_spec)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        n, desc = marker.args
        _acceptance_lines.append((n, f"criterion {n:>2}: {status}  {desc}"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, description): acceptance criterion n")
