import numpy as np
import pytest

from digeo.shapes import make_icosphere, make_plane, make_torus


@pytest.fixture(scope="session")
def sphere3():
    return make_icosphere(3)


@pytest.fixture(scope="session")
def sphere4():
    return make_icosphere(4)


@pytest.fixture(scope="session")
def sphere5():
    return make_icosphere(5)


@pytest.fixture(scope="session")
def torus_coarse():
    return make_torus(2.0, 1.0, 64, 32)


@pytest.fixture(scope="session")
def plane():
    return make_plane(20, size=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
