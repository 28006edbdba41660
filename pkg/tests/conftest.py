import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cpsc.model import CpscModel, ModelConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return ModelConfig(input_dims=(5, 6), feature_dim=4, component_count=3, top_k=2, class_count=3, hidden=6)


@pytest.fixture
def tiny_model(tiny_config):
    return CpscModel(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> one-line verdict, echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
