from pathlib import Path
from typing import Optional, Tuple

import click

from app.cli import cli
from app.cli.common import RUN_DIR, experiment_options, load_config, load_pipeline, prepare_plant, qcqp_backend, write_json
from app.services.scheme_service import SchemeService


@cli.command("sweep-omega")
@experiment_options
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/data")
@click.option("--ingredients-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/ingredients")
@click.option("--omega", "omegas", type=float, multiple=True, help="Consistency slack to try (repeatable)")
def sweep_omega(
    config_path: str,
    out: str,
    seed: Optional[int],
    data_dir: Optional[str],
    ingredients_dir: Optional[str],
    omegas: Tuple[float, ...],
):
    """Rerun the closed loop for several consistency slacks and compare the final neighborhoods"""
    config = load_config(config_path, seed)
    out = Path(out)
    model, _, agents = load_pipeline(config, out, data_dir, ingredients_dir)
    results = SchemeService.sweep_consistency_slack(
        prepare_plant(config, model),
        agents,
        list(omegas) or config.run.omegas,
        config.run.T,
        pre_input=config.run.pre_input,
        backend=qcqp_backend(config),
        concurrency=config.solver.concurrency,
    )
    write_json(out / RUN_DIR / "sweep.json", results)
    click.echo(f"{'omega':>10} {'feasible':>9} {'max ||xi|| (2nd half)':>22}")
    for entry in results:
        size = f"{entry['final_neighborhood']:.4g}" if entry["feasible"] else "-"
        click.echo(f"{entry['omega']:>10.4g} {'yes' if entry['feasible'] else 'no':>9} {size:>22}")
