import numpy as np
import pytest

from hardedge.env import GridSpec, sample_environment


@pytest.fixture(scope="session")
def env8():
    return sample_environment(GridSpec(8, 64, 0), 2.0)


@pytest.fixture(scope="session")
def env32():
    return sample_environment(GridSpec(32, 1024, 0), 2.0)


@pytest.fixture(scope="session")
def flat32():
    return sample_environment(GridSpec(32, 1024, 0), 2.0, zero_noise=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
