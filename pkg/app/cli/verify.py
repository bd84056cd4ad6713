import math
from pathlib import Path
from typing import Dict, Optional

import click
import numpy as np
import pandas as pd

from app.cli import cli
from app.cli.common import (
    DATA_DIR,
    INGREDIENTS_DIR,
    build_agents,
    build_network,
    experiment_options,
    load_config,
    load_datasets,
    load_ingredients,
    prepare_plant,
    qcqp_backend,
    write_json,
)
from app.core.errors import (
    ArtifactError,
    BootstrapError,
    MpcInfeasibleError,
    OnlineSolverError,
    VerificationFailed,
)
from app.schemas.artifacts import VerificationReport
from app.services.plant_service import PlantService
from app.services.scheme_service import SchemeService
from app.services.signal_service import SignalService
from app.services.terminal_service import TerminalService
import logging

logger = logging.getLogger(__name__)


def read_log_deviations(path: Path) -> Dict[int, float]:
    """Largest logged xi deviation per agent of an exported closed-loop log"""
    if not path.exists():
        raise ArtifactError("Closed-loop log not found", {"path": str(path)})
    try:
        frame = pd.read_csv(path, usecols=["agent", "xi_deviation"], float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        raise ArtifactError("Malformed closed-loop log", {"path": str(path), "error": str(e)})
    worst = frame.groupby("agent")["xi_deviation"].max().fillna(0.0)
    return {int(node): float(value) for node, value in worst.items()}


@cli.command("verify")
@experiment_options
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/data")
@click.option("--ingredients-dir", type=click.Path(file_okay=False), default=None, help="Defaults to OUT/ingredients")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None,
              help="Closed-loop log CSV; without it a fresh run measures the deviations")
def verify(
    config_path: str,
    out: str,
    seed: Optional[int],
    data_dir: Optional[str],
    ingredients_dir: Optional[str],
    log_path: Optional[str],
):
    """Check structural assumptions, excitation, terminal ingredients and the feasibility inequality"""
    config = load_config(config_path, seed)
    out = Path(out)
    mpc = config.mpc
    model = build_network(config)
    datasets = load_datasets(model, Path(data_dir) if data_dir else out / DATA_DIR)
    ingredients = load_ingredients(model, Path(ingredients_dir) if ingredients_dir else out / INGREDIENTS_DIR, mpc.n)
    report = VerificationReport()

    structure = PlantService.verify_structural_assumptions(model)
    report.add("controllability", structure["all_controllable"],
               detail=", ".join(str(i) for i, ok in structure["controllable"].items() if not ok) or None)
    report.add("observability", structure["observable"])

    order = PlantService.required_pe_order(mpc.L, mpc.n)
    lower, upper = (np.asarray(bound, dtype=float) for bound in mpc.u_box)
    reach = np.minimum(upper, -lower)
    thresholds: Dict[int, float] = {}
    for i in model.graph.nodes:
        data = datasets[i]
        stacked = SignalService.stack_signals([data.u_d, data.y_neighbors_d])
        report.add(f"persistent_excitation[{i}]", order <= data.N and SignalService.check_persistent_excitation(stacked, order))

        terminal = ingredients[i]
        theta = mpc.theta if mpc.theta is not None else terminal.theta
        report.add(f"theta_tightening[{i}]", theta >= terminal.theta_lower_bound, value=theta, threshold=terminal.theta_lower_bound)

        support = TerminalService.input_support(terminal.P, terminal.K, terminal.epsilon)
        report.add(f"terminal_input_box[{i}]", bool(np.all(support <= reach * (1 + 1e-9))),
                   value=float(np.max(support)), threshold=float(np.min(reach)))

        shift = TerminalService.build_shift_structure(mpc.n, data.m, data.neighbor_dim, data.p)
        s = TerminalService.build_synthesis_data(data, mpc.n, shift)
        A_cl = TerminalService.closed_loop_from_data(s, shift, terminal.K)
        D = TerminalService.decrease_matrix(A_cl, terminal.P, terminal.K, np.array(mpc.Q), np.array(mpc.R), shift)
        margin = TerminalService.decrease_margin(D, terminal.P)
        report.add(f"terminal_decrease[{i}]", margin > 0, value=margin, threshold=0.0)
        thresholds[i] = (1.0 - math.sqrt(theta)) * math.sqrt(terminal.epsilon)

    deviations: Optional[Dict[int, float]] = None
    if log_path:
        deviations = read_log_deviations(Path(log_path))
    else:
        agents = build_agents(config, datasets, ingredients)
        plant = prepare_plant(config, model)
        backend = qcqp_backend(config)
        try:
            histories = SchemeService.initial_measurements(plant, mpc.n, config.run.pre_input)
            boot = SchemeService.bootstrap(agents, histories, config.run.bootstrap, config.run.candidates, backend)
            log = SchemeService.run_closed_loop(plant, agents, boot, config.run.T, backend=backend,
                                                concurrency=config.solver.concurrency)
            deviations = {i: entry["xi_deviation"] for i, entry in SchemeService.estimate_deviation_bounds(log, agents).items()}
            report.add("closed_loop_feasible", True)
        except (BootstrapError, MpcInfeasibleError, OnlineSolverError) as e:
            report.add("closed_loop_feasible", False, detail=str(e))

    if deviations is not None:
        for i in model.graph.nodes:
            value = deviations.get(i, float("nan"))
            report.add(f"candidate_deviation[{i}]", value <= thresholds[i], value=value, threshold=thresholds[i])

    write_json(out / "verify" / "report.json", report.model_dump())
    for check in report.checks:
        suffix = f" ({check.value:.4g} vs {check.threshold:.4g})" if check.value is not None and check.threshold is not None else ""
        click.echo(f"{'PASS' if check.passed else 'FAIL'} {check.name}{suffix}")
    if not report.success:
        raise VerificationFailed(f"{len(report.failed)} of {len(report.checks)} checks failed",
                                 {"failed": [check.name for check in report.failed][:10]})
    click.echo(f"All {len(report.checks)} checks passed")
