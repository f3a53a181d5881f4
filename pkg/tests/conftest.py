import pytest

from meanfield import build_system, solve_fixed_point
from model import build_model


@pytest.fixture(scope="session")
def model_2d():
    return build_model()


@pytest.fixture(scope="session")
def model_1d():
    return build_model({"dim": 1})


@pytest.fixture(scope="session")
def system_2d(model_2d):
    return build_system(model_2d, 12)


@pytest.fixture(scope="session")
def system_1d(model_1d):
    return build_system(model_1d, 32)


@pytest.fixture(scope="session")
def fixed_point_1d(system_1d):
    return solve_fixed_point(system_1d, 3.0, 1.0)
