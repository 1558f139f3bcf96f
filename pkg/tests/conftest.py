import numpy as np
import pytest

from backbone_recon.camera import Distortion
from backbone_recon.evaluation import default_scenario, generate_images
from helpers import make_camera


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def images(scenario):
    return generate_images(scenario)[0]


@pytest.fixture
def stereo_rig():
    dist = Distortion(k1=-0.1, k2=0.04, k3=0.002, p1=3e-4, p2=-2e-4)
    return [make_camera((560.0, -300.0, 150.0), dist=dist), make_camera((560.0, 300.0, 120.0), dist=dist)]


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
