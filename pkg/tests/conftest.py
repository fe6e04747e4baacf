from __future__ import annotations

import numpy as np
import pytest

from lpfeedback.bellman import detect_caustics
from lpfeedback.localsolve import solve_local
from lpfeedback.lpmanifold import build_atlas
from lpfeedback.maslov import build_regularized_field
from lpfeedback.sysdef import SystemSpec

SQRT2 = np.sqrt(2.0)


def sys_a() -> SystemSpec:
    return SystemSpec.from_strings(1, 1, ["0"], [["1"]], "x1^2", [["1"]])


def sys_b() -> SystemSpec:
    return SystemSpec.from_strings(1, 1, ["x1"], [["1"]], "x1^2", [["1"]])


def sys_c() -> SystemSpec:
    return SystemSpec.from_strings(2, 1, ["x2", "sin(x1)"], [["0"], ["1"]], "x1^2+x2^2", [["1"]])


@pytest.fixture(scope="session")
def spec_a():
    return sys_a()


@pytest.fixture(scope="session")
def spec_b():
    return sys_b()


@pytest.fixture(scope="session")
def spec_c():
    return sys_c()


@pytest.fixture(scope="session")
def local_a(spec_a):
    return solve_local(spec_a, candidates=[0.04])


@pytest.fixture(scope="session")
def local_b(spec_b):
    return solve_local(spec_b, candidates=[0.04 * (1 + SQRT2)])


@pytest.fixture(scope="session")
def local_c(spec_c):
    return solve_local(spec_c)


@pytest.fixture(scope="session")
def atlas_a(spec_a, local_a):
    return build_atlas(spec_a, local_a, tau_max=np.log(5.0) + 1.0, n_tau=201)


@pytest.fixture(scope="session")
def atlas_b(spec_b, local_b):
    return build_atlas(spec_b, local_b, tau_max=2.0, n_tau=201)


@pytest.fixture(scope="session")
def atlas_c(spec_c, local_c):
    return build_atlas(spec_c, local_c, n_xi=256, tau_max=3.0, n_tau=301, escape_radius=1e3)


@pytest.fixture(scope="session")
def cloud_c(atlas_c):
    return detect_caustics(atlas_c)


@pytest.fixture(scope="session")
def field_c(atlas_c, cloud_c):
    return build_regularized_field(atlas_c, cloud_c, k=200)


# one pass/fail line per acceptance criterion ---------------------------------

_ACCEPTANCE: dict[int, list] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    num = int(name.split("_")[2])
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.setdefault(num, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        outcomes = _ACCEPTANCE.get(num)
        if outcomes is None:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {CRITERIA[num]}")
