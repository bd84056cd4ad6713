import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
import pandas as pd

from app.core.errors import (
    ArtifactError,
    BootstrapError,
    DdmpcError,
    MpcInfeasibleError,
    OnlineSolverError,
    SolverError,
)
from app.core.solver import INFEASIBLE_STATUSES, QCQP, SolverBackend
from app.models.agent import AgentConfig, MpcSolution, NeighborTrajectory
from app.models.network import NetworkModel
from app.models.scheme import ClosedLoopLog, MessageBus, StepRecord, TrajectoryMessage
from app.models.signals import Trajectory
from app.schemas.artifacts import CandidateEntry, CandidateFile
from app.services.agent_service import AgentService
from app.services.plant_service import PlantService
from app.services.signal_service import SignalService
from app.tasks.solve_tasks import run_per_node
import logging

logger = logging.getLogger(__name__)

CENTRALIZED = "centralized"
FILE = "file"

History = Dict[int, Tuple[Trajectory, Trajectory]]


@dataclass
class BootstrapResult:
    """Measured windows over [-n, -1], initial candidates over [-n, L - 1] and initial messages"""
    histories: History
    candidates: Dict[int, Tuple[Trajectory, Trajectory]]
    messages: Dict[int, Trajectory]


class SchemeService:

    @staticmethod
    def initial_measurements(plant: NetworkModel, n: int, pre_input: float = 0.0) -> History:
        """Hold `pre_input` for n steps and record (u, y) of every node over [-n, -1]"""
        inputs = {i: np.full((n, plant.subsystems[i].m), pre_input) for i in plant.graph.nodes}
        recorded = PlantService.simulate(plant, inputs)
        return {
            i: (Trajectory(inputs[i], -n), Trajectory(recorded[i]["y"], -n))
            for i in plant.graph.nodes
        }

    @staticmethod
    def neighbor_trajectory(cfg: AgentConfig, messages: Mapping[int, Trajectory]) -> NeighborTrajectory:
        if not cfg.neighbors:
            return NeighborTrajectory.zeros(cfg.L, cfg.n, 0)
        stacked = SignalService.stack_signals([messages[j] for j in cfg.neighbors])
        return NeighborTrajectory(stacked)

    @staticmethod
    def messages_from_candidates(candidates: Mapping[int, Tuple[Trajectory, Trajectory]]) -> Dict[int, Trajectory]:
        """The first transmitted trajectory is y_hat_[-n, L-1](0) read as y*_[-n+1, L](-1)"""
        return {i: y_hat.reindexed(y_hat.start_index + 1) for i, (_, y_hat) in candidates.items()}

    @staticmethod
    def _centralized_candidates(
        agents: Mapping[int, AgentConfig],
        histories: History,
        backend: SolverBackend,
    ) -> Dict[int, Tuple[Trajectory, Trajectory]]:
        outputs = {i: cp.Variable((cfg.L + cfg.n) * cfg.p) for i, cfg in agents.items()}
        output_dims = {i: cfg.p for i, cfg in agents.items()}
        programs = {}
        for i, cfg in agents.items():
            u_init, y_init = histories[i]
            programs[i] = AgentService.build_program(
                cfg,
                u_init,
                y_init,
                AgentService.stacked_neighbor_outputs(cfg, outputs, output_dims, -cfg.n, cfg.L - 2),
                AgentService.stacked_neighbor_outputs(cfg, outputs, output_dims, cfg.L - cfg.n, cfg.L - 1),
                reference=None,
                y=outputs[i],
            )
        problem = cp.Problem(
            cp.Minimize(sum(program.cost for program in programs.values())),
            [constraint for program in programs.values() for constraint in program.constraints],
        )
        try:
            status = backend.solve(problem)
        except SolverError as e:
            raise OnlineSolverError("Bootstrap solve failed", e.details) from e
        if status in INFEASIBLE_STATUSES or any(program.u.value is None for program in programs.values()):
            raise BootstrapError("Joint bootstrap program is infeasible", {"status": status})
        logger.info(f"Centralized bootstrap solved for {len(agents)} nodes ({status}), cost {problem.value:.6g}")
        return {
            i: (
                Trajectory.from_flat(program.u.value, agents[i].m, -agents[i].n),
                Trajectory.from_flat(program.y.value, agents[i].p, -agents[i].n),
            )
            for i, program in programs.items()
        }

    @staticmethod
    def verify_candidates(
        agents: Mapping[int, AgentConfig],
        histories: History,
        candidates: Mapping[int, Tuple[Trajectory, Trajectory]],
    ) -> Dict[int, Dict[str, float]]:
        """Violations of the candidates against the constraints at t = 0 (without consistency)"""
        messages = SchemeService.messages_from_candidates(candidates)
        violations = {}
        for i, cfg in agents.items():
            u_init, y_init = histories[i]
            u_hat, y_hat = candidates[i]
            report = AgentService.check_constraints(
                cfg, u_hat, y_hat, u_init, y_init, SchemeService.neighbor_trajectory(cfg, messages), None
            )
            violations[i] = report.violated
        return violations

    @staticmethod
    def bootstrap(
        agents: Mapping[int, AgentConfig],
        histories: History,
        mode: str = CENTRALIZED,
        candidates_path: Optional[Union[str, Path]] = None,
        backend: Optional[SolverBackend] = None,
    ) -> BootstrapResult:
        """
        Initially feasible candidates and messages

        "centralized" solves one joint program over all nodes with the neighbor
        outputs shared between the local problems and no consistency constraints;
        "file" loads candidates saved earlier. Both are re-checked before use.

        Raises:
            BootstrapError: joint program infeasible or loaded candidates violate a constraint
        """
        backend = backend or SolverBackend(QCQP)
        if mode == CENTRALIZED:
            candidates = SchemeService._centralized_candidates(agents, histories, backend)
        elif mode == FILE:
            if candidates_path is None:
                raise BootstrapError("Bootstrap mode 'file' needs a candidates path")
            candidates = SchemeService.load_candidates(candidates_path, agents)
        else:
            raise BootstrapError(f"Unknown bootstrap mode '{mode}'")

        violations = {i: v for i, v in SchemeService.verify_candidates(agents, histories, candidates).items() if v}
        if violations:
            logger.error(f"Initial candidates violate constraints: {violations}")
            raise BootstrapError("Initial candidates are not feasible", {"violations": violations})
        return BootstrapResult(
            histories=dict(histories),
            candidates=dict(candidates),
            messages=SchemeService.messages_from_candidates(candidates),
        )

    @staticmethod
    def _neighbor_history(plant: NetworkModel, i: int, outputs: Mapping[int, Trajectory]) -> Trajectory:
        own = outputs[i]
        neighbors = plant.graph.neighbors(i)
        if not neighbors:
            return Trajectory.zeros(own.length, 0, own.start_index)
        return SignalService.stack_signals([outputs[j] for j in neighbors])

    @staticmethod
    def global_state_norm(
        plant: NetworkModel,
        inputs: Mapping[int, Trajectory],
        outputs: Mapping[int, Trajectory],
        t: int,
        n: int,
    ) -> float:
        """||xi_t|| of the stacked measured extended states"""
        states = {
            i: PlantService.extended_state_from_history(
                inputs[i], SchemeService._neighbor_history(plant, i, outputs), outputs[i], t, n
            )
            for i in plant.graph.nodes
        }
        return float(np.linalg.norm(PlantService.global_extended_state(states)))

    @staticmethod
    def run_closed_loop(
        plant: NetworkModel,
        agents: Mapping[int, AgentConfig],
        boot: BootstrapResult,
        T: int,
        bus: Optional[MessageBus] = None,
        backend: Optional[SolverBackend] = None,
        concurrency: Optional[int] = None,
    ) -> ClosedLoopLog:
        """
        Run the distributed scheme for T steps (mutates plant.states)

        Each step: solve all local problems, apply u*_0, measure, extend, exchange
        one message per edge, build the next candidates.

        Raises:
            MpcInfeasibleError / OnlineSolverError: with the offending step and node
        """
        backend = backend or SolverBackend(QCQP)
        bus = bus or MessageBus(plant.graph)
        nodes = list(plant.graph.nodes)
        n = agents[nodes[0]].n
        log = ClosedLoopLog()

        inputs = {i: boot.histories[i][0] for i in nodes}
        outputs = {i: boot.histories[i][1] for i in nodes}
        for i in nodes:
            bus.send(TrajectoryMessage(i, -1, boot.messages[i]))
        received = {i: bus.receive(i, -1, agents[i].L, agents[i].n) for i in nodes}
        references = {
            i: AgentService.initial_reference(*boot.candidates[i], agents[i].L)
            for i in nodes
        }

        for t in range(T):
            log.xi_norm[t] = SchemeService.global_state_norm(plant, inputs, outputs, t, n)

            def solve(i: int) -> MpcSolution:
                try:
                    return AgentService.solve_local_mpc(
                        agents[i],
                        inputs[i].window(t - n, t - 1),
                        outputs[i].window(t - n, t - 1),
                        received[i],
                        references[i],
                        backend,
                    )
                except (MpcInfeasibleError, OnlineSolverError) as e:
                    e.details.update(step=t)
                    raise

            solutions = run_per_node(nodes, solve, concurrency, "local MPC")
            states = {i: plant.states[i].copy() for i in nodes}
            measured = PlantService.step_network(plant, {i: solutions[i].u_star.at(0) for i in nodes})
            for i in nodes:
                inputs[i] = inputs[i].append(Trajectory(solutions[i].u_star.at(0).reshape(1, -1), t))
                outputs[i] = outputs[i].append(Trajectory(measured[i].reshape(1, -1), t))

            extended = run_per_node(
                nodes, lambda i: AgentService.extend(agents[i], solutions[i], received[i]), concurrency, "extension"
            )
            for i in nodes:
                bus.send(TrajectoryMessage(i, t, extended[i].message()))
            log.messages[t] = bus.messages_in_round(t)
            received = {i: bus.receive(i, t, agents[i].L, agents[i].n) for i in nodes}
            if bus.pending():
                raise DdmpcError("Undelivered messages after exchange", {"step": t, "pending": bus.pending()})

            candidates = run_per_node(
                nodes,
                lambda i: AgentService.build_candidate(agents[i], extended[i], received[i], outputs[i].window(t + 1 - n, t)),
                concurrency,
                "candidate",
            )
            references = {i: candidates[i].reference for i in nodes}
            candidate_reports = {
                i: AgentService.check_candidate(
                    agents[i], candidates[i], inputs[i].window(t + 1 - n, t), outputs[i].window(t + 1 - n, t), received[i]
                )
                for i in nodes
            }
            candidate_costs = {
                i: AgentService.candidate_cost(
                    agents[i], candidates[i], inputs[i].window(t + 1 - n, t), outputs[i].window(t + 1 - n, t), received[i]
                )
                for i in nodes
            }

            for i in nodes:
                margins = [value for key, value in solutions[i].margins.items() if key.startswith("consistency")]
                predicted = solutions[i].y_star.at(0)
                error = float(np.linalg.norm(measured[i] - predicted))
                if not candidate_reports[i].success:
                    logger.warning(f"Candidate of node {i} after step {t} violates {candidate_reports[i].violated}")
                if error > 1e-4:
                    logger.debug(f"Node {i} at step {t}: measured output differs from prediction by {error:.3g}")
                log.add(StepRecord(
                    t=t,
                    node=i,
                    u=solutions[i].u_star.at(0).copy(),
                    y=np.asarray(measured[i], dtype=float).copy(),
                    x_true=states[i],
                    cost_local=solutions[i].cost,
                    status=solutions[i].status,
                    min_consistency_margin=min(margins) if margins else float("nan"),
                    xi_deviation=candidates[i].xi_deviation,
                    y_deviation=candidates[i].y_deviation,
                    prediction_error=error,
                    candidate_margin=min(
                        value for key, value in candidate_reports[i].margins.items() if key.startswith("consistency")
                    ),
                    candidate_feasible=candidate_reports[i].success,
                    candidate_cost=candidate_costs[i],
                    solution=extended[i],
                ))
            log.V_global[t] = SchemeService.compute_global_cost(log, t)
            logger.info(f"Step {t}: ||xi|| = {log.xi_norm[t]:.4g}, V = {log.V_global[t]:.4g}")
        return log

    @staticmethod
    def compute_global_cost(log: ClosedLoopLog, t: int) -> float:
        """V*_t, the sum of the optimal local costs at step t"""
        return float(sum(record.cost_local for record in log.at(t)))

    @staticmethod
    def estimate_deviation_bounds(log: ClosedLoopLog, agents: Mapping[int, AgentConfig]) -> Dict[int, Dict[str, Any]]:
        """
        Empirical candidate deviations per node against (1 - sqrt(theta)) sqrt(epsilon)

        Returns:
            dict: node -> {"xi_deviation", "y_deviation", "threshold", "satisfied"}
        """
        report: Dict[int, Dict[str, Any]] = {}
        for i in log.nodes:
            records = log.for_node(i)
            xi_values = np.array([r.xi_deviation for r in records], dtype=float)
            y_values = np.array([r.y_deviation for r in records], dtype=float)
            xi_max = float(np.nanmax(xi_values)) if np.any(np.isfinite(xi_values)) else 0.0
            y_max = float(np.nanmax(y_values)) if np.any(np.isfinite(y_values)) else 0.0
            threshold = float(agents[i].terminal.deviation_threshold())
            report[i] = {
                "xi_deviation": xi_max,
                "y_deviation": y_max,
                "threshold": threshold,
                "satisfied": xi_max <= threshold,
            }
        return report

    @staticmethod
    def estimate_cost_upper_bound(log: ClosedLoopLog) -> Dict[str, float]:
        """Least-squares slope and largest ratio of V*_t against ||xi_t||^2"""
        pairs = [(log.xi_norm[t] ** 2, log.V_global[t]) for t in log.steps if t in log.V_global and log.xi_norm.get(t, 0.0) > 0]
        if not pairs:
            return {"slope": 0.0, "max_ratio": 0.0, "samples": 0}
        squares, values = (np.array(column) for column in zip(*pairs))
        return {
            "slope": float(squares @ values / (squares @ squares)),
            "max_ratio": float(np.max(values / squares)),
            "samples": len(pairs),
        }

    @staticmethod
    def sweep_consistency_slack(
        plant: NetworkModel,
        agents: Mapping[int, AgentConfig],
        omegas: Sequence[float],
        T: int,
        pre_input: float = 0.0,
        backend: Optional[SolverBackend] = None,
        concurrency: Optional[int] = None,
    ) -> List[Dict[str, Any]]:
        """
        Rerun the closed loop from the same initial state for several consistency slacks

        Reports the final neighborhood size max_{t >= T/2} ||xi_t|| per slack; a run
        that becomes infeasible is reported instead of raised.
        """
        results = []
        for omega in omegas:
            model = plant.copy()
            tuned = {i: replace(cfg, omega=omega) for i, cfg in agents.items()}
            n = next(iter(tuned.values())).n
            entry: Dict[str, Any] = {"omega": float(omega)}
            try:
                histories = SchemeService.initial_measurements(model, n, pre_input)
                boot = SchemeService.bootstrap(tuned, histories, backend=backend)
                log = SchemeService.run_closed_loop(model, tuned, boot, T, backend=backend, concurrency=concurrency)
            except (BootstrapError, MpcInfeasibleError, OnlineSolverError) as e:
                logger.warning(f"Sweep run with omega {omega} failed: {e}")
                entry.update(feasible=False, error=str(e))
                results.append(entry)
                continue
            tail = [log.xi_norm[t] for t in log.steps if t >= T // 2]
            entry.update(
                feasible=True,
                final_neighborhood=float(max(tail)) if tail else float("nan"),
                final_cost=log.V_global[log.steps[-1]],
            )
            results.append(entry)
        return results

    @staticmethod
    def save_candidates(boot: BootstrapResult, L: int, n: int, path: Union[str, Path]) -> None:
        payload = CandidateFile(
            L=L,
            n=n,
            candidates=[
                CandidateEntry(node=i, start_index=u_hat.start_index, u=u_hat.values.tolist(), y=y_hat.values.tolist())
                for i, (u_hat, y_hat) in sorted(boot.candidates.items())
            ],
        )
        Path(path).write_text(payload.model_dump_json(indent=2))

    @staticmethod
    def load_candidates(
        path: Union[str, Path],
        agents: Mapping[int, AgentConfig],
    ) -> Dict[int, Tuple[Trajectory, Trajectory]]:
        """
        Raises:
            ArtifactError: if the file is missing, malformed or does not match the agents
        """
        path = Path(path)
        if not path.exists():
            raise ArtifactError("Candidate file not found", {"path": str(path)})
        try:
            payload = CandidateFile.model_validate(json.loads(path.read_text()))
        except (ValueError, json.JSONDecodeError) as e:
            raise ArtifactError("Malformed candidate file", {"path": str(path), "error": str(e)})
        entries = {entry.node: entry for entry in payload.candidates}
        if set(entries) != set(agents):
            raise ArtifactError("Candidate file nodes do not match the network", {"file": sorted(entries), "network": sorted(agents)})
        candidates = {}
        for i, cfg in agents.items():
            entry = entries[i]
            if payload.L != cfg.L or payload.n != cfg.n or entry.start_index != -cfg.n or len(entry.u) != cfg.L + cfg.n:
                raise ArtifactError("Candidate horizon does not match the configuration", {"node": i})
            candidates[i] = (Trajectory(np.array(entry.u), entry.start_index), Trajectory(np.array(entry.y), entry.start_index))
        return candidates

    @staticmethod
    def log_frame(log: ClosedLoopLog) -> pd.DataFrame:
        """One row per (t, node); vector columns are padded with NaN to the largest node dimension"""
        sizes = {
            name: max((np.asarray(getattr(record, name)).size for record in log.records), default=0)
            for name in ("u", "y", "x_true")
        }
        columns = ["t", "agent"]
        for name in ("u", "y", "x_true"):
            columns += [f"{name}[{k}]" for k in range(sizes[name])]
        columns += [
            "cost_local", "V_global", "status", "min_consistency_margin", "xi_deviation", "y_deviation", "candidate_margin",
        ]

        rows: List[Dict[str, Any]] = []
        for record in sorted(log.records, key=lambda r: (r.t, r.node)):
            row: Dict[str, Any] = {"t": record.t, "agent": record.node}
            for name in ("u", "y", "x_true"):
                values = np.asarray(getattr(record, name), dtype=float).reshape(-1)
                row.update({f"{name}[{k}]": float(v) for k, v in enumerate(values)})
            row.update(
                cost_local=record.cost_local,
                V_global=log.V_global.get(record.t, float("nan")),
                status=record.status,
                min_consistency_margin=record.min_consistency_margin,
                xi_deviation=record.xi_deviation,
                y_deviation=record.y_deviation,
                candidate_margin=record.candidate_margin,
            )
            rows.append(row)
        return pd.DataFrame(rows, columns=columns)

    @staticmethod
    def export_log_csv(log: ClosedLoopLog, path: Union[str, Path]) -> None:
        SchemeService.log_frame(log).to_csv(path, index=False)
