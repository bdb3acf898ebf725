import sys
from pathlib import Path

import pytest
from hypothesis import settings

from gridflow.grid_model import load_bundled

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ieee30():
    return load_bundled("ieee30")


@pytest.fixture(scope="session")
def toy_cases():
    return {name: load_bundled(name) for name in ("toy2", "toy3", "toy4")}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
