import numpy as np
import pytest

from depthcal import simulator as sim
from depthcal.depth_model import BiasKind, BiasModel

GT = BiasModel(BiasKind.SCALED_POLYNOMIAL, (0.006, 0.0))


def small_room(n_scans=3, bias=GT, n_azimuth=180, n_elevation=40, seed=7, noise_std=0.0):
    """Room preset from a few poses with a coarse ray grid (~1e4 to 2e4 points)."""
    scene = sim.room_scene()
    poses = sim.room_poses(n_scans, seed=seed)
    sensor = sim.SensorModel(n_azimuth=n_azimuth, n_elevation=n_elevation, bias=bias, noise_std=noise_std)
    scans, truths = sim.simulate_sequence(scene, poses, sensor)
    return scene, poses, scans, truths


@pytest.fixture(scope="session")
def room3():
    return small_room()


@pytest.fixture(scope="session")
def room3_clean():
    return small_room(bias=BiasModel())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def corridor_biased():
    scene, poses = sim.corridor_scene(), sim.corridor_poses()
    scans, truths = sim.simulate_sequence(scene, poses, sim.SensorModel(bias=GT))
    return scene, poses, scans, truths


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
