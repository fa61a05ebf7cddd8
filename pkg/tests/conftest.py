import numpy as np
import pytest

from lpobs.control_law import ControllerConfig
from lpobs.observer import ObserverGains
from lpobs.plants import build_plant, default_gamma


@pytest.fixture(scope="session")
def paper_plant():
    return build_plant("paper_example_2x2")


@pytest.fixture(scope="session")
def paper_cfg():
    return ControllerConfig(
        Bhat=np.eye(2),
        K_blocks=[np.array([0.25, 1.0]), np.array([0.125, 0.75, 1.5])],
        sat_level=25.0,
        eps0=0.5,
    )


@pytest.fixture(scope="session")
def paper_gamma():
    return [default_gamma(2), default_gamma(3)]


@pytest.fixture()
def paper_gains_ci(paper_gamma):
    return ObserverGains(gamma=paper_gamma, ell=np.array([5e3, 50.0]))


@pytest.fixture()
def paper_gains_full(paper_gamma):
    return ObserverGains(gamma=paper_gamma, ell=np.array([5e5, 200.0]))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
