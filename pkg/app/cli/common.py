import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import click
import numpy as np

from app.core.errors import ArtifactError
from app.core.solver import QCQP, SDP, SolverBackend
from app.models.agent import AgentConfig
from app.models.network import CouplingGraph, DataSet, NetworkModel, SubsystemModel
from app.models.terminal import TerminalIngredients
from app.schemas.experiment import ExperimentConfig
from app.services.agent_service import AgentService
from app.services.plant_service import PlantService
from app.services.terminal_service import TerminalService
from app.tasks.solve_tasks import run_per_node
import logging

logger = logging.getLogger(__name__)

DATA_DIR = "data"
INGREDIENTS_DIR = "ingredients"
RUN_DIR = "run"


def load_config(path: str, seed: Optional[int] = None) -> ExperimentConfig:
    """Parse the config; --seed overrides the data and run seeds"""
    config = ExperimentConfig.load(path)
    if seed is not None:
        config.data.seed = seed
        config.run.seed = seed
    return config


def build_network(config: ExperimentConfig) -> NetworkModel:
    network = config.network
    if network.topology == "chain":
        return PlantService.build_chain_network(
            network.M, network.mass, network.damping, network.coupling_gain, network.dt
        )
    subsystems = {
        sub.node: SubsystemModel(sub.A, sub.B, sub.C, sub.D, dict(zip(sub.neighbors, sub.coupling)))
        for sub in network.subsystems
    }
    graph = CouplingGraph(tuple(sorted(subsystems)), {sub.node: tuple(sub.neighbors) for sub in network.subsystems})
    return NetworkModel(graph, subsystems)


def backend(config: ExperimentConfig, capability: str) -> SolverBackend:
    solver = config.solver
    return SolverBackend(
        capability,
        preferred=solver.sdp_solver if capability == SDP else solver.qp_solver,
        feas_tol=solver.feas_tol,
        max_iters=solver.max_iters,
    )


def data_path(directory: Path, node: int) -> Path:
    return Path(directory) / f"node_{node}.csv"


def ingredients_path(directory: Path, node: int) -> Path:
    return Path(directory) / f"node_{node}.json"


def load_datasets(model: NetworkModel, directory: Path) -> Dict[int, DataSet]:
    datasets = {}
    for i in model.graph.nodes:
        data = PlantService.load_dataset(data_path(directory, i), i, model.graph.neighbors(i))
        expected = (model.subsystems[i].m, model.subsystems[i].p, model.neighbor_dim(i))
        if (data.m, data.p, data.neighbor_dim) != expected:
            raise ArtifactError("Data file does not match the network", {"node": i, "expected (m, p, q)": expected})
        datasets[i] = data
    return datasets


def load_ingredients(model: NetworkModel, directory: Path, n: int) -> Dict[int, TerminalIngredients]:
    ingredients = {}
    for i in model.graph.nodes:
        payload, terminal = TerminalService.load_ingredients(ingredients_path(directory, i))
        dims = (payload.dims.n, payload.dims.m, payload.dims.neighbor_dim, payload.dims.p)
        expected = (n, model.subsystems[i].m, model.neighbor_dim(i), model.subsystems[i].p)
        if payload.node != i or dims != expected:
            raise ArtifactError("Terminal-ingredient file does not match the network", {"node": i, "dims": dims})
        ingredients[i] = terminal
    return ingredients


def build_agents(
    config: ExperimentConfig,
    datasets: Dict[int, DataSet],
    ingredients: Dict[int, TerminalIngredients],
) -> Dict[int, AgentConfig]:
    mpc, solver = config.mpc, config.solver

    def build(i: int) -> AgentConfig:
        return AgentService.build_agent_config(
            datasets[i],
            mpc.L,
            mpc.n,
            np.array(mpc.Q),
            np.array(mpc.R),
            mpc.omega,
            mpc.u_box,
            ingredients[i],
            sim_tol=solver.sim_tol,
            check_tol=solver.check_tol,
        )

    return run_per_node(datasets, build, solver.concurrency, "agent setup")


def prepare_plant(config: ExperimentConfig, model: NetworkModel) -> NetworkModel:
    """Fresh plant with random initial states drawn from the run section"""
    plant = model.copy()
    PlantService.randomize_states(plant, config.run.initial_range, config.run.seed)
    return plant


def load_pipeline(
    config: ExperimentConfig,
    out: Path,
    data_dir: Optional[str],
    ingredients_dir: Optional[str],
) -> Tuple[NetworkModel, Dict[int, DataSet], Dict[int, AgentConfig]]:
    """Network, stored data sets and agents built from the stored ingredients"""
    model = build_network(config)
    datasets = load_datasets(model, Path(data_dir) if data_dir else out / DATA_DIR)
    ingredients = load_ingredients(model, Path(ingredients_dir) if ingredients_dir else out / INGREDIENTS_DIR, config.mpc.n)
    return model, datasets, build_agents(config, datasets, ingredients)


def qcqp_backend(config: ExperimentConfig) -> SolverBackend:
    return backend(config, QCQP)


def sdp_backend(config: ExperimentConfig) -> SolverBackend:
    return backend(config, SDP)


def experiment_options(func):
    """--config, --out and --seed shared by every command"""
    func = click.option("--seed", type=int, default=None, help="Override the data and run seeds")(func)
    func = click.option("--out", type=click.Path(file_okay=False), default="artifacts", show_default=True,
                        help="Artifact directory")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True,
                        help="Experiment config (JSON)")(func)
    return func


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=float))
