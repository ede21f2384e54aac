import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfac import FisherConfig, synthetic_gradients

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# long-run GD optimum of LogisticToy.synthetic() (lr=1, 20000 steps, |grad| < 1e-13),
# confirmed by L-BFGS-B to all printed digits
LOGISTIC_OPTIMUM = 0.2187990251064602


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(seed, d, m, lam=1e-2, rank=None):
    G = synthetic_gradients(m, d, seed, rank=rank)
    return G, FisherConfig(m=m, lam=lam, dim=d)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
