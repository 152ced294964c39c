"""Shared fixtures.

The Monte Carlo study fixtures are expensive (tens of seconds each on one
core) and session-scoped so that the calibration checks and the acceptance
gate share a single run.  Seeds are fixed: the assertions downstream are
statements about those specific, reproducible draws.
"""

import numpy as np
import pytest

from hingeaxes import SimConfig
from hingeaxes.simulate import run_study


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run long Monte Carlo checks (adds several minutes)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="long Monte Carlo check; enable with --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def study_m30():
    """100 replicates of 30 subjects x 50 frames, error sd 1 degree."""
    config = SimConfig(
        n_subjects=30, n_frames=50, replicates=100, error_sd_deg=1.0,
        seed=20260801,
    )
    return run_study(config)


@pytest.fixture(scope="session")
def study_m100():
    """Same per-frame error with 100 subjects, for variance calibration."""
    config = SimConfig(
        n_subjects=100, n_frames=50, replicates=100, error_sd_deg=1.0,
        seed=20260803,
    )
    return run_study(config)


@pytest.fixture(scope="session")
def rich_motion_rotations():
    """Error-free frames spanning a wide motion range at the default angles."""
    from hingeaxes.subject import default_angles, model_rotation

    rng = np.random.default_rng(515)
    alpha = rng.uniform(-np.radians(60), np.radians(60), size=200)
    phi = rng.uniform(-np.radians(40), np.radians(40), size=200)
    return model_rotation(default_angles(), alpha, phi)
