import numpy as np
import pytest

from mvtv.metric_space import build_circle, build_finite, build_icosphere


@pytest.fixture(scope="session")
def ico1():
    return build_icosphere(1)


@pytest.fixture(scope="session")
def ico2():
    return build_icosphere(2)


@pytest.fixture(scope="session")
def circle8():
    return build_circle(8)


@pytest.fixture(scope="session")
def twopoint():
    return build_finite([[0.0, 1.0], [1.0, 0.0]], [(0, 1)])


def random_measure(space, rng):
    u = rng.random(space.l) + 1e-3
    return u / (space.volumes @ u)


@pytest.fixture
def rng():
    return np.random.default_rng(20240803)
