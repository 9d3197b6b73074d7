import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hhefl.bfv.params import BfvParams
from hhefl.bfv.scheme import keygen

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# small ring with enough primes for a couple of multiplications
SMALL = BfvParams.preset("toy-64x6")


@pytest.fixture(scope="session")
def small_params():
    return SMALL


@pytest.fixture(scope="session")
def small_keys():
    return keygen(SMALL, rotation_steps=(1, 2, 3, -1, 5, 17), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
