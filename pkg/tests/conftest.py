import numpy as np
import pytest

from vgf_backstepping.config import load_spec
from vgf_backstepping.material import PhaseParams, StefanConfig
from vgf_backstepping.reference import ReferenceField


@pytest.fixture(scope="session")
def spec():
    return load_spec(environ={})


@pytest.fixture(scope="session")
def gaas(spec):
    return spec.material


@pytest.fixture(scope="session")
def traj(spec):
    return spec.trajectory.build()


@pytest.fixture(scope="session")
def ref(spec, traj):
    return ReferenceField(traj, spec.material, spec.trajectory.order)


@pytest.fixture
def unit_cfg():
    """Unit material data on [0, 1]."""
    solid = PhaseParams(1.0, 1.0, 1.0, -1, 0.0)
    liquid = PhaseParams(1.0, 1.0, 1.0, 1, 1.0)
    return StefanConfig(solid, liquid, melting_temp=1.0, melt_density=1.0, latent_heat=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
