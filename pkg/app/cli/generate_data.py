from pathlib import Path
from typing import Optional

import click

from app.cli import cli
from app.cli.common import DATA_DIR, build_network, data_path, experiment_options, load_config, write_json
from app.services.plant_service import PlantService
from app.services.signal_service import SignalService
import logging

logger = logging.getLogger(__name__)


@cli.command("generate-data")
@experiment_options
def generate_data(config_path: str, out: str, seed: Optional[int]):
    """Excite the network and write one data CSV per node plus a PE report"""
    config = load_config(config_path, seed)
    model = build_network(config)
    L, n = config.mpc.L, config.mpc.n
    datasets = PlantService.collect_data(
        model,
        config.data.N,
        L,
        n,
        excitation=tuple(config.data.excitation),
        seed=config.data.seed,
        initial_range=config.data.initial_range,
    )

    directory = Path(out) / DATA_DIR
    directory.mkdir(parents=True, exist_ok=True)
    order = PlantService.required_pe_order(L, n)
    report = {"order": order, "N": config.data.N, "nodes": {}}
    for i, data in datasets.items():
        PlantService.save_dataset(data, data_path(directory, i))
        stacked = SignalService.stack_signals([data.u_d, data.y_neighbors_d])
        hankel = SignalService.build_hankel(stacked, order)
        rank = SignalService.numerical_rank(hankel.entries)
        report["nodes"][str(i)] = {
            "rank": rank,
            "required": stacked.dim * order,
            "persistently_exciting": rank == stacked.dim * order,
        }
    write_json(directory / "pe_report.json", report)
    click.echo(f"Wrote {len(datasets)} data sets to {directory} (PE order {order} holds for every node)")
