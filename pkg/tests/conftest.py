import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture(scope="session")
def unit_square():
    from hemoshape.discretization.mesh import rectangle_mesh
    return rectangle_mesh(8)


@pytest.fixture(scope="session")
def unit_disk_mesh():
    from hemoshape.discretization.mesh import build_reference_mesh
    from hemoshape.geometry import disk
    return build_reference_mesh(disk(1.0), 0.2)


def config_path(name):
    return os.path.join(CONFIGS, name)
