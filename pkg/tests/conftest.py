from typing import Dict

import numpy as np
import pytest

from app.core.solver import QCQP, SDP, SolverBackend
from app.models.agent import AgentConfig
from app.models.network import DataSet, NetworkModel
from app.services.agent_service import AgentService
from app.services.plant_service import PlantService
from app.services.terminal_service import TerminalService

L = 5
N_LAG = 2
N_SAMPLES = 100
U_BOX = ([-2.0], [2.0])
Q = np.eye(1)
R = np.eye(1)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def design_agents(
    model: NetworkModel,
    datasets: Dict[int, DataSet],
    omega: float = 0.01,
    backend: SolverBackend = None,
) -> Dict[int, AgentConfig]:
    backend = backend or SolverBackend(SDP)
    agents = {}
    for i, data in datasets.items():
        terminal = TerminalService.design(data, N_LAG, Q, R, U_BOX, backend)
        agents[i] = AgentService.build_agent_config(data, L, N_LAG, Q, R, omega, U_BOX, terminal, sim_tol=1e-6)
    return agents


@pytest.fixture
def chain3() -> NetworkModel:
    return PlantService.build_chain_network(3)


@pytest.fixture
def isolated3() -> NetworkModel:
    return PlantService.build_chain_network(3, coupling_gain=0.0)


@pytest.fixture(scope="session")
def chain3_data() -> Dict[int, DataSet]:
    return PlantService.collect_data(PlantService.build_chain_network(3), N_SAMPLES, L, N_LAG, seed=0)


@pytest.fixture(scope="session")
def chain3_agents(chain3_data) -> Dict[int, AgentConfig]:
    return design_agents(PlantService.build_chain_network(3), chain3_data)


@pytest.fixture(scope="session")
def isolated3_data() -> Dict[int, DataSet]:
    return PlantService.collect_data(PlantService.build_chain_network(3, coupling_gain=0.0), N_SAMPLES, L, N_LAG, seed=0)


@pytest.fixture(scope="session")
def isolated3_agents(isolated3_data) -> Dict[int, AgentConfig]:
    return design_agents(PlantService.build_chain_network(3, coupling_gain=0.0), isolated3_data)


@pytest.fixture
def qcqp_backend() -> SolverBackend:
    return SolverBackend(QCQP)


@pytest.fixture
def sdp_backend() -> SolverBackend:
    return SolverBackend(SDP)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def agent_factory():
    """design_agents for tests that build their own network"""
    return design_agents
