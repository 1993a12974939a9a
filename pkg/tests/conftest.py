import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return torch.tensor(q)


# ---- acceptance criteria summary

CRITERIA = {
    1: "gradient correctness",
    2: "analytic invariants",
    3: "oracle equivalence",
    4: "desk reconstruction",
    5: "held-out motion reconstruction",
    6: "single-pass sampling",
    7: "interpolation continuity",
    8: "determinism",
    9: "prompt projection",
}
_outcomes: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes.get(n)
        status = "not run" if runs is None else ("PASS" if all(runs) else "FAIL")
        terminalreporter.write_line(f"criterion {n} ({name}): {status}")
