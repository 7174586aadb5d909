import re

import numpy as np
import pytest

from boneeit.forward import adjacent_protocol
from boneeit.mesh import generate_disk_mesh
from boneeit.phantom import phantom_mesh

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def default_mesh():
    """Default 16-electrode tank mesh (h = 5 mm) conforming to the inclusion."""
    return phantom_mesh()


@pytest.fixture(scope="session")
def small_mesh():
    return generate_disk_mesh(0.0665, 16, 0.5, 0.008)


@pytest.fixture(scope="session")
def coarse_mesh():
    """Under 300 elements; 8 electrodes keep the electrode resolution rule."""
    return generate_disk_mesh(0.0665, 8, 0.5, 0.015)


@pytest.fixture(scope="session")
def protocol16():
    return adjacent_protocol(16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" and report.outcome == "passed":
        return
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if m:
        _ACCEPTANCE.append((int(m.group(1)), m.group(2).replace("_", " "), report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, outcome in sorted(_ACCEPTANCE):
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] criterion {num}: {name}")
