import numpy as np
import pytest

from gridftc.desk_models import desk2_plant, desk4_plant, desk5_plant


@pytest.fixture(scope="session")
def desk5():
    return desk5_plant()


@pytest.fixture(scope="session")
def desk5_lin(desk5):
    return desk5.linearize()


@pytest.fixture(scope="session")
def desk2():
    return desk2_plant()


@pytest.fixture(scope="session")
def desk4():
    return desk4_plant()


@pytest.fixture(scope="session")
def desk4_lin(desk4):
    return desk4.linearize()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260814)
