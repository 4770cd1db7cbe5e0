"""
Shared pytest configuration.

Acceptance-scale tests are marked ``slow`` and only run with ``--runslow``.
"""

import pytest

from cellmix.models.params import FlowParams, StepPolicy


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def unit_cell_params():
    """One cell per side, moderate Peclet number."""
    return FlowParams(epsilon=0.5, amplitude=1.0, kappa=0.1)


@pytest.fixture
def quarter_cell_params():
    return FlowParams(epsilon=0.25, amplitude=1.0, kappa=0.01)


@pytest.fixture
def resolved_policy():
    """Step policy with dt a fixed fraction of 1/(A k^2), the strain time of the cells."""

    def build(params: FlowParams, fraction: float = 0.2, t_max=None) -> StepPolicy:
        return StepPolicy(dt=fraction / (params.amplitude * params.wavenumber ** 2), t_max=t_max)

    return build
