import math

import numpy as np
import pytest

from microct.geometry import full_geometry, limited_geometry, sparse_geometry


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_geometries(size=32):
    return {
        "limited60": limited_geometry(size, math.pi / 3, 30),
        "limited30": limited_geometry(size, math.pi / 6, 20),
        "sparse12": sparse_geometry(size, 12),
        "sparse6": sparse_geometry(size, 6),
        "full": full_geometry(size, 45),
    }


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _CRITERIA.append((value, report.outcome))


_CRITERIA: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line, outcome in sorted(_CRITERIA, key=lambda t: int(t[0].split(":")[0])):
        terminalreporter.write_line(f"criterion {line} -> {'PASS' if outcome == 'passed' else 'FAIL'}")
