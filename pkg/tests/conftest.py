"""Shared fixtures: BLAS thread cap, small model configurations, and the
acceptance-criterion report printed after the run."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

import tokmerge as tm

# Single-threaded BLAS keeps timings stable and results reproducible.
threadpool_limits(limits=1)

# One line per acceptance criterion, filled in by test_acceptance.py and
# echoed below the test summary so the verdicts survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Joint model with a class token: 2 layers, 51 tokens."""
    return tm.ModelConfig(
        attention_mode=tm.JOINT, layers=2, embed_dim=16, heads=4, frames=2,
        tubelet_t=1, patch=16, image_size=80, has_class_token=True,
        proportional_attention=True, num_classes=5)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return tm.init_synthetic_weights(tiny_cfg, 7)


@pytest.fixture(scope="session")
def tiny_video(tiny_cfg):
    return tm.synthetic_video(tiny_cfg, 3)


@pytest.fixture(scope="session")
def tiny_divided_cfg():
    """Divided model: 3 layers, 4 frames of 36 tokens."""
    return tm.ModelConfig(
        attention_mode=tm.DIVIDED, layers=3, embed_dim=24, heads=4, frames=4,
        tubelet_t=1, patch=8, image_size=48, has_class_token=False,
        proportional_attention=True, num_classes=7)


@pytest.fixture(scope="session")
def tiny_divided_weights(tiny_divided_cfg):
    return tm.init_synthetic_weights(tiny_divided_cfg, 11)
