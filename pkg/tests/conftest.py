import json
import sys
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for n, m in list(sys.modules.items()) if n.rsplit(".", 1)[-1] == "test_acceptance"), None)
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[tag])
