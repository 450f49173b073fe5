import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gibly import _accel

settings.register_profile(
    "gibly", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("gibly")

BACKENDS = ["numba", "numpy"] if _accel.HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available backend."""
    previous = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
