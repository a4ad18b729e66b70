"""Shared fixtures: reference models and a clean settings instance per test."""

import pytest

from front_deviations.core.model import BranchingModel, JumpKernel
from front_deviations.utils.config import Settings, set_settings


@pytest.fixture(autouse=True)
def fresh_settings():
    settings = Settings()
    set_settings(settings)
    yield settings
    set_settings(Settings())


@pytest.fixture
def bbm2():
    return BranchingModel.bbm(2)


@pytest.fixture
def bbm3():
    return BranchingModel.bbm(3)


@pytest.fixture
def two_atom():
    """Jumps of +-1 at rate 1/2 each, binary branching at rate 1, no diffusion."""
    return BranchingModel.from_atoms([(1.0, 0.5), (-1.0, 0.5)], {2: 1.0}, name="two-atom")


@pytest.fixture
def asymmetric():
    return BranchingModel.from_atoms([(2.0, 0.3), (-1.0, 0.7)], {2: 1.0}, diffusion=0.5, name="asymmetric")


@pytest.fixture
def mixed_offspring():
    return BranchingModel(diffusion=1.0, offspring=((2, 0.5), (3, 0.5)), name="mixed")


@pytest.fixture
def gaussian_jumps():
    kernel = JumpKernel.from_density("exp(-y**2 / 2) / sqrt(2 * pi)", (-10.0, 10.0))
    return BranchingModel(diffusion=0.25, jumps=kernel, name="gaussian-jumps")


@pytest.fixture
def free_motion():
    """Pure diffusion without branching, for heat-equation checks."""
    return BranchingModel(diffusion=1.0, offspring=((2, 0.0),), name="free")
