"""Shared fixtures: small scenarios and tiny networks so unit tests stay fast."""
from pathlib import Path

import numpy as np
import pytest

from src.models.barrier import BarrierModel, NonSeqBarrierModel
from src.schemas.barrier import BarrierArch, NonSeqArch
from src.schemas.dynamics import DynamicsKind
from src.schemas.sim import Scenario
from src.services.ego_dynamics import TrueDynamics


@pytest.fixture
def tiny_arch():
    return BarrierArch(history_length=3, lstm_hidden=8, ego_hidden=(8,), head_hidden=(16,))


@pytest.fixture
def tiny_nonseq_arch():
    return NonSeqArch(obstacle_hidden=(8,), ego_hidden=(8,), head_hidden=(16,))


@pytest.fixture
def si_model(tiny_arch):
    return BarrierModel.initialize(DynamicsKind.SINGLE_INTEGRATOR, tiny_arch, seed=0)


@pytest.fixture
def dubins_model(tiny_arch):
    return BarrierModel.initialize(DynamicsKind.DUBINS, tiny_arch, seed=1)


@pytest.fixture
def nonseq_model(tiny_nonseq_arch):
    return NonSeqBarrierModel.initialize(DynamicsKind.SINGLE_INTEGRATOR, tiny_nonseq_arch, seed=0)


@pytest.fixture
def si_dynamics():
    return TrueDynamics(DynamicsKind.SINGLE_INTEGRATOR, 0.1)


@pytest.fixture
def small_scenario():
    return Scenario(obstacle_count=3, ego_dynamics_kind=DynamicsKind.SINGLE_INTEGRATOR,
                    arena_half_extent=5.0, ego_start=(-4.0, -4.0), ego_goal=(4.0, 4.0), max_steps=60, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_config(tmp_path):
    """Write ``key = value`` text to a config file and return its path"""

    def _write(text: str, name: str = "experiment.cfg") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
