from pathlib import Path
from typing import Optional

import click
import numpy as np

from app.cli import cli
from app.cli.common import (
    DATA_DIR,
    INGREDIENTS_DIR,
    build_network,
    experiment_options,
    ingredients_path,
    load_config,
    load_datasets,
    sdp_backend,
)
from app.services.terminal_service import TerminalService
from app.tasks.solve_tasks import run_per_node
import logging

logger = logging.getLogger(__name__)


@cli.command("synthesize")
@experiment_options
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/data")
def synthesize(config_path: str, out: str, seed: Optional[int], data_dir: Optional[str]):
    """Design terminal cost, controller and set for every node from its data"""
    config = load_config(config_path, seed)
    model = build_network(config)
    datasets = load_datasets(model, Path(data_dir) if data_dir else Path(out) / DATA_DIR)
    mpc = config.mpc
    backend = sdp_backend(config)

    def design(i: int):
        return TerminalService.design(
            datasets[i],
            mpc.n,
            np.array(mpc.Q),
            np.array(mpc.R),
            mpc.u_box,
            backend,
            epsilon=mpc.epsilon,
            theta=mpc.theta,
            theta_floor=mpc.theta_floor,
            coupling_bound=mpc.coupling_bound,
            seed=config.data.seed,
        )

    ingredients = run_per_node(model.graph.nodes, design, config.solver.concurrency, "terminal synthesis")

    directory = Path(out) / INGREDIENTS_DIR
    directory.mkdir(parents=True, exist_ok=True)
    click.echo(f"{'node':>5} {'epsilon':>10} {'eta':>10} {'theta':>8} {'lambda_min':>11} {'lambda_max':>11}")
    for i, terminal in ingredients.items():
        data = datasets[i]
        TerminalService.save_ingredients(terminal, (mpc.n, data.m, data.neighbor_dim, data.p), i, ingredients_path(directory, i))
        click.echo(
            f"{i:>5} {terminal.epsilon:>10.3g} {terminal.eta:>10.3g} {terminal.theta:>8.4f} "
            f"{terminal.lambda_min:>11.4g} {terminal.lambda_max:>11.4g}"
        )
    click.echo(f"Wrote {len(ingredients)} ingredient files to {directory}")
