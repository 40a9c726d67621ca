import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    """Small synthetic dataset (6 views, 48x48) shared across tests."""
    from fusesplat.dataio import generate_synthetic

    root = tmp_path_factory.mktemp("synth_small")
    return generate_synthetic(3, n_views=6, n_gaussians=12, out_dir=root, width=48, height=48, test_every=3)


# Acceptance results, one line per criterion, printed after the run.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
