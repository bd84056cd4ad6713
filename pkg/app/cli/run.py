from pathlib import Path
from typing import Optional

import click

from app.cli import cli
from app.cli.common import (
    RUN_DIR,
    experiment_options,
    load_config,
    load_pipeline,
    prepare_plant,
    qcqp_backend,
    write_json,
)
from app.services.plot_service import PlotService
from app.services.scheme_service import SchemeService
import logging

logger = logging.getLogger(__name__)


@cli.command("run")
@experiment_options
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/data")
@click.option("--ingredients-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/ingredients")
def run(config_path: str, out: str, seed: Optional[int], data_dir: Optional[str], ingredients_dir: Optional[str]):
    """Bootstrap and run the distributed closed loop; writes log CSV and state plot"""
    config = load_config(config_path, seed)
    out = Path(out)
    model, _, agents = load_pipeline(config, out, data_dir, ingredients_dir)
    plant = prepare_plant(config, model)
    backend = qcqp_backend(config)
    directory = out / RUN_DIR
    directory.mkdir(parents=True, exist_ok=True)

    histories = SchemeService.initial_measurements(plant, config.mpc.n, config.run.pre_input)
    boot = SchemeService.bootstrap(agents, histories, config.run.bootstrap, config.run.candidates, backend)
    SchemeService.save_candidates(boot, config.mpc.L, config.mpc.n, directory / "candidates.json")

    log = SchemeService.run_closed_loop(plant, agents, boot, config.run.T, backend=backend, concurrency=config.solver.concurrency)
    SchemeService.export_log_csv(log, directory / "log.csv")
    if config.run.plot_nodes:
        PlotService.plot_states(log, config.run.plot_nodes, directory / "states.svg")

    deviations = SchemeService.estimate_deviation_bounds(log, agents)
    cost_bound = SchemeService.estimate_cost_upper_bound(log)
    write_json(directory / "summary.json", {
        "steps": config.run.T,
        "xi_norm": {str(t): value for t, value in log.xi_norm.items()},
        "V_global": {str(t): value for t, value in log.V_global.items()},
        "messages": {str(t): count for t, count in log.messages.items()},
        "deviation_bounds": {str(i): {key: (bool(v) if key == "satisfied" else v) for key, v in entry.items()}
                             for i, entry in deviations.items()},
        "cost_upper_bound": cost_bound,
    })

    click.echo(f"{'node':>5} {'xi deviation':>13} {'y deviation':>12} {'threshold':>10}  ok")
    for i, entry in deviations.items():
        click.echo(
            f"{i:>5} {entry['xi_deviation']:>13.3e} {entry['y_deviation']:>12.3e} "
            f"{entry['threshold']:>10.3e}  {'yes' if entry['satisfied'] else 'no'}"
        )
    click.echo(f"V*_t <= c ||xi_t||^2 estimate: slope {cost_bound['slope']:.4g}, max ratio {cost_bound['max_ratio']:.4g}")
    click.echo(f"Closed loop finished after {config.run.T} steps; artifacts in {directory}")
