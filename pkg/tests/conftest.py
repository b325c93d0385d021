import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("OTFLOW_STRETCH") == "1":
        return
    skip = pytest.mark.skip(reason="long-running; set OTFLOW_STRETCH=1 to run")
    for item in items:
        if "stretch" in item.keywords:
            item.add_marker(skip)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
