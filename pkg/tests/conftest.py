import numpy as np
import pytest

from efg3d.approx import ApproxParams
from efg3d.cloud import generate_cube_grid, generate_cylinder_grid
from efg3d.material import MaterialParams


@pytest.fixture(scope="session")
def cube6():
    return generate_cube_grid(0.1, 6)


@pytest.fixture(scope="session")
def cylinder_coarse():
    return generate_cylinder_grid(0.1, 0.1, 0.00822)


@pytest.fixture(scope="session")
def soft():
    return MaterialParams(3000.0, 0.49, 1000.0)


@pytest.fixture
def params():
    return ApproxParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
