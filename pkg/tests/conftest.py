from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from pushgrasp.sim import DEFAULT_SHAPES, Pose, add_object, empty_scene, spawn_random


def random_scene(seed: int, n: int, size: int = 48):
    return spawn_random(empty_scene(size, seed=seed), n, np.random.default_rng(seed))


seeds = st.integers(min_value=0, max_value=2**32 - 1)
rotations = st.integers(min_value=0, max_value=15)


@pytest.fixture
def stacked_pair():
    """A 4x4 square half covered by a 4x8 bar lying across its upper half."""
    scene = empty_scene(32)
    scene = add_object(scene, DEFAULT_SHAPES[0], Pose(16.0, 16.0), color_id=1)
    scene = add_object(scene, DEFAULT_SHAPES[2], Pose(16.0, 14.0, np.pi / 2), color_id=2)
    return scene


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = getattr(item, "acceptance_detail", "")
    _ACCEPTANCE.append((marker.args[0], "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict} {name}" + (f" ({detail})" if detail else ""))
