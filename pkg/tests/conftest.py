"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from emf.backbone import init_model
from emf.model import ModelConfig
from emf.reparam import fuse_model

ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def default_model():
    return init_model(ModelConfig(), seed=42)


@pytest.fixture(scope="session")
def fused_default(default_model):
    return fuse_model(default_model)


@pytest.fixture(scope="session")
def tiny_config():
    """Small widths so forward passes take milliseconds."""
    return ModelConfig(stage_channels=(8, 16, 16, 24), head_width=16)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Attach a measured-value note to an acceptance test's summary line."""
    notes = []
    request.node.user_properties.append(("criterion_notes", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    notes = dict(item.user_properties).get("criterion_notes", [])
    number, title = marker.args
    ACCEPTANCE[number] = (title, report.outcome, "; ".join(notes))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, outcome, notes = ACCEPTANCE[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] {number:>2}. {title}"
        if notes:
            line += f" ({notes})"
        terminalreporter.write_line(line)
