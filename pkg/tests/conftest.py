import sys

import pytest

from priot.cli import fixture_checkpoint_path
from priot.dataio import load_checkpoint


@pytest.fixture(scope="session")
def fixture_ckpt():
    return load_checkpoint(fixture_checkpoint_path())


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
