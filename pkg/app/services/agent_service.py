from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.errors import MpcInfeasibleError, OnlineSolverError, SolverError, TerminalDesignError
from app.core.solver import INFEASIBLE_STATUSES, QCQP, SolverBackend
from app.models.agent import (
    AgentConfig,
    Candidate,
    ConsistencyReference,
    ConstraintReport,
    MpcSolution,
    NeighborTrajectory,
)
from app.models.network import DataSet, ExtendedState
from app.models.signals import Trajectory
from app.models.terminal import TerminalIngredients
from app.services.behavior_service import BehaviorService
import logging

logger = logging.getLogger(__name__)

Affine = Union[np.ndarray, cp.Expression]


@dataclass
class LocalProgram:
    """cvxpy pieces of one node's problem: explicit alpha, u and y over [-n, L - 1]"""
    alpha: cp.Variable
    u: cp.Variable
    y: cp.Variable
    xi_L: cp.Expression
    cost: cp.Expression
    constraints: List[cp.Constraint]


def _hstack(parts: Sequence[Affine]) -> cp.Expression:
    return cp.hstack([part for part in parts if part.size > 0])


def _sample(vector: Affine, k: int, dim: int, n: int) -> Affine:
    """Sample k (relative index, k >= -n) of a flat trajectory starting at -n"""
    return vector[(k + n) * dim:(k + n + 1) * dim]


def _weighted(x: Affine, weight: np.ndarray, repeats: int) -> cp.Expression:
    factor = scipy.linalg.cholesky(np.kron(np.eye(repeats), weight))
    return cp.sum_squares(factor @ x)


class AgentService:

    @staticmethod
    def build_agent_config(
        data: DataSet,
        L: int,
        n: int,
        Q: np.ndarray,
        R: np.ndarray,
        omega: float,
        u_box: Tuple[Sequence[float], Sequence[float]],
        terminal: TerminalIngredients,
        sim_tol: Optional[float] = None,
        check_tol: Optional[float] = None,
    ) -> AgentConfig:
        lower, upper = u_box
        return AgentConfig(
            node=data.node,
            neighbors=data.neighbors,
            L=L,
            n=n,
            Q=Q,
            R=R,
            omega=omega,
            u_lower=lower,
            u_upper=upper,
            terminal=terminal,
            predictor=BehaviorService.build_predictor(data, L, n),
            sim_data=BehaviorService.build_simulation_data(data, n),
            sim_tol=1e-6 if sim_tol is None else sim_tol,
            check_tol=settings.CHECK_TOL if check_tol is None else check_tol,
        )

    @staticmethod
    def build_program(
        cfg: AgentConfig,
        u_init: Trajectory,
        y_init: Trajectory,
        y_neighbors: Affine,
        y_neighbors_terminal: Affine,
        reference: Optional[ConsistencyReference],
        y: Optional[cp.Variable] = None,
    ) -> LocalProgram:
        """
        Constraints and cost of the local problem

        `y_neighbors` is the flat neighbor output over [-n, L - 2] and
        `y_neighbors_terminal` over [L - n, L - 1]; both are constants in the
        distributed solve and expressions of the neighbors' outputs in the joint
        bootstrap program, which also passes its own output variable `y`. The
        Hankel equality is imposed on its row space plus the orthogonal
        complement of the range.
        """
        pred, L, n, m, p = cfg.predictor, cfg.L, cfg.n, cfg.m, cfg.p
        alpha = cp.Variable(pred.columns)
        u = cp.Variable((L + n) * m)
        y = cp.Variable((L + n) * p) if y is None else y

        w = _hstack([u, y_neighbors, y])
        constraints: List[cp.Constraint] = [
            (pred.row_basis.T @ pred.stacked) @ alpha == pred.row_basis.T @ w,
            u[:n * m] == u_init.flat(),
            y[:n * p] == y_init.flat(),
            u[n * m:] >= np.tile(cfg.u_lower, L),
            u[n * m:] <= np.tile(cfg.u_upper, L),
        ]
        if pred.null_basis.shape[1]:
            constraints.append(pred.null_basis.T @ w == 0)

        xi_L = _hstack([u[L * m:], y_neighbors_terminal, y[L * p:]])
        terminal_cost = _weighted(xi_L, cfg.terminal.P, 1)
        constraints.append(terminal_cost <= cfg.terminal.theta * cfg.terminal.epsilon)

        if reference is not None:
            for k in range(L):
                constraints.append(
                    cp.sum_squares(_sample(u, k, m, n) - reference.u_prev.at(k)) <= reference.input_bound(k) + cfg.omega
                )
                constraints.append(
                    cp.sum_squares(_sample(y, k, p, n) - reference.y_prev.at(k)) <= reference.output_bound(k) + cfg.omega
                )

        cost = _weighted(y[n * p:], cfg.Q, L) + _weighted(u[n * m:], cfg.R, L) + terminal_cost
        return LocalProgram(alpha, u, y, xi_L, cost, constraints)

    @staticmethod
    def stacked_neighbor_outputs(
        cfg: AgentConfig,
        outputs: Mapping[int, cp.Variable],
        output_dims: Mapping[int, int],
        first: int,
        last: int,
    ) -> Affine:
        """Flat neighbor outputs over [first, last] taken from the neighbors' own output variables"""
        parts = [
            _sample(outputs[j], k, output_dims[j], cfg.n)
            for k in range(first, last + 1)
            for j in cfg.neighbors
        ]
        return _hstack(parts) if parts else np.zeros(0)

    @staticmethod
    def _neighbor_windows(cfg: AgentConfig, neighbor_msg: NeighborTrajectory) -> Tuple[Trajectory, Trajectory]:
        L, n = cfg.L, cfg.n
        return neighbor_msg.shifted_window(-n, L - 2), neighbor_msg.shifted_window(L - n, L - 1)

    @staticmethod
    def solution_from_values(
        cfg: AgentConfig,
        alpha: np.ndarray,
        u: np.ndarray,
        y: np.ndarray,
        y_neighbors_terminal: Trajectory,
        status: str = "optimal",
    ) -> MpcSolution:
        L, n = cfg.L, cfg.n
        u_star = Trajectory.from_flat(u, cfg.m, -n)
        y_star = Trajectory.from_flat(y, cfg.p, -n)
        xi_L = ExtendedState(
            u_star.window(L - n, L - 1).values,
            y_neighbors_terminal.values,
            y_star.window(L - n, L - 1).values,
        )
        return MpcSolution(
            alpha=np.asarray(alpha, dtype=float),
            u_star=u_star,
            y_star=y_star,
            xi_L=xi_L,
            cost=AgentService.plan_cost(cfg, u_star, y_star, xi_L),
            status=status,
        )

    @staticmethod
    def plan_cost(cfg: AgentConfig, u: Trajectory, y: Trajectory, xi_L: ExtendedState) -> float:
        """Stage costs over [0, L - 1] plus the terminal cost"""
        stage = sum(
            float(y.at(k) @ cfg.Q @ y.at(k) + u.at(k) @ cfg.R @ u.at(k))
            for k in range(cfg.L)
        )
        return stage + cfg.terminal.terminal_value(xi_L.vector)

    @staticmethod
    def solve_local_mpc(
        cfg: AgentConfig,
        u_init: Trajectory,
        y_init: Trajectory,
        neighbor_msg: NeighborTrajectory,
        reference: Optional[ConsistencyReference],
        backend: Optional[SolverBackend] = None,
    ) -> MpcSolution:
        """
        Solve the local data-driven MPC problem of one node

        Args:
            cfg: Agent configuration
            u_init, y_init: last n measured inputs and outputs
            neighbor_msg: neighbor outputs received after the previous step
            reference: consistency reference (None drops the consistency constraints)

        Returns:
            MpcSolution: certified by `check_constraints`

        Raises:
            MpcInfeasibleError: with the constraint violations of the plugged-in reference
            OnlineSolverError: solver crash or a solution failing the re-check
        """
        backend = backend or SolverBackend(QCQP)
        y_neighbors, y_neighbors_terminal = AgentService._neighbor_windows(cfg, neighbor_msg)
        program = AgentService.build_program(
            cfg, u_init, y_init, y_neighbors.flat(), y_neighbors_terminal.flat(), reference
        )
        problem = cp.Problem(cp.Minimize(program.cost), program.constraints)
        try:
            status = backend.solve(problem)
        except SolverError as e:
            raise OnlineSolverError("Local MPC solve failed", {"node": cfg.node, **e.details}) from e

        if status in INFEASIBLE_STATUSES or program.u.value is None:
            details = {"node": cfg.node, "status": status}
            if reference is not None:
                u_ref, y_ref = AgentService.reference_plan(u_init, y_init, reference)
                report = AgentService.check_constraints(cfg, u_ref, y_ref, u_init, y_init, neighbor_msg, reference)
                details["reference_violations"] = report.violated
            logger.error(f"Local MPC of node {cfg.node} is infeasible: {details}")
            raise MpcInfeasibleError("Local MPC problem is infeasible", details)

        solution = AgentService.solution_from_values(
            cfg, program.alpha.value, program.u.value, program.y.value, y_neighbors_terminal, status
        )
        report = AgentService.check_constraints(
            cfg, solution.u_star, solution.y_star, u_init, y_init, neighbor_msg, reference
        )
        if not report.success:
            raise OnlineSolverError(
                "Solver returned a point that fails the constraint re-check",
                {"node": cfg.node, "violations": report.violated},
            )
        logger.debug(f"Node {cfg.node} solved with cost {solution.cost:.6g} ({status})")
        return replace(solution, margins=report.margins)

    @staticmethod
    def check_constraints(
        cfg: AgentConfig,
        u: Trajectory,
        y: Trajectory,
        u_init: Trajectory,
        y_init: Trajectory,
        neighbor_msg: NeighborTrajectory,
        reference: Optional[ConsistencyReference],
        tol: Optional[float] = None,
    ) -> ConstraintReport:
        """
        Re-check a plan (u, y over [-n, L - 1]) against every constraint of the local problem

        Does not trust solver status codes: the Hankel equality is re-solved in
        least squares and every inequality is evaluated directly.
        """
        tol = cfg.check_tol if tol is None else tol
        L, n = cfg.L, cfg.n
        y_neighbors, y_neighbors_terminal = AgentService._neighbor_windows(cfg, neighbor_msg)
        violations: Dict[str, float] = {}
        margins: Dict[str, float] = {}

        check = BehaviorService.check_trajectory(
            cfg.sim_data.data, u.window(-n, L - 1), y_neighbors, y.window(-n, L - 1), tol=tol
        )
        w_norm = np.linalg.norm(np.concatenate([u.flat(), y_neighbors.flat(), y.flat()]))
        violations["hankel"] = max(0.0, check.residual - tol * max(1.0, w_norm))
        violations["initial_input"] = float(np.max(np.abs(u.window(-n, -1).values - u_init.values)))
        violations["initial_output"] = float(np.max(np.abs(y.window(-n, -1).values - y_init.values)))

        planned = u.window(0, L - 1).values
        violations["input_box"] = float(max(0.0, np.max(cfg.u_lower - planned), np.max(planned - cfg.u_upper)))

        xi_L = ExtendedState(u.window(L - n, L - 1).values, y_neighbors_terminal.values, y.window(L - n, L - 1).values)
        level = cfg.terminal.theta * cfg.terminal.epsilon
        terminal_value = cfg.terminal.terminal_value(xi_L.vector)
        violations["terminal"] = terminal_value - level
        margins["terminal"] = level - terminal_value

        if reference is not None:
            input_margin = min(
                reference.input_bound(k) + cfg.omega - float(np.sum((u.at(k) - reference.u_prev.at(k)) ** 2))
                for k in range(L)
            )
            output_margin = min(
                reference.output_bound(k) + cfg.omega - float(np.sum((y.at(k) - reference.y_prev.at(k)) ** 2))
                for k in range(L)
            )
            violations["consistency_input"] = -input_margin
            violations["consistency_output"] = -output_margin
            margins["consistency_input"] = input_margin
            margins["consistency_output"] = output_margin
        return ConstraintReport(violations=violations, margins=margins, tol=tol)

    @staticmethod
    def extend(cfg: AgentConfig, sol: MpcSolution, neighbor_msg: NeighborTrajectory) -> MpcSolution:
        """
        One-step extension u*_L = K xi*_L, y*_L by data-driven simulation over L + 1 samples

        Raises:
            TerminalDesignError: if the terminal controller leaves the input box
        """
        L, n = cfg.L, cfg.n
        u_ext = cfg.terminal.control(sol.xi_L.vector)
        if not cfg.in_box(u_ext, cfg.check_tol):
            raise TerminalDesignError(
                "Terminal controller leaves the input box",
                {"node": cfg.node, "u_ext": u_ext.tolist()},
            )
        new_u = sol.u_star.window(0, L - 1).append(Trajectory(u_ext.reshape(1, -1), L))
        simulated = BehaviorService.datadriven_simulate(
            cfg.sim_data,
            init_u=sol.u_star.window(-n, -1),
            init_yn=neighbor_msg.shifted_window(-n, -1),
            init_y=sol.y_star.window(-n, -1),
            new_u=new_u,
            new_yn=neighbor_msg.shifted_window(0, L - 1),
            horizon=L + 1,
            tol=cfg.sim_tol,
        )
        return sol.with_extension(u_ext, simulated.at(L))

    @staticmethod
    def build_candidate(
        cfg: AgentConfig,
        prev: MpcSolution,
        neighbor_msg: NeighborTrajectory,
        measured_y: Trajectory,
    ) -> Candidate:
        """
        Shifted candidate at time t from the extended solution at t - 1

        u_hat over [-n, L - 2] is u*(t - 1) over [-n + 1, L - 1]; the outputs are
        simulated first over L - 1 samples to assemble xi_hat_{L-1}, then
        u_hat_{L-1} = K xi_hat_{L-1} and a full horizon-L simulation completes y_hat.

        Args:
            prev: extended solution of the previous step
            neighbor_msg: messages transmitted after the previous step
            measured_y: own outputs measured over the last n steps
        """
        L, n = cfg.L, cfg.n
        previous_inputs = prev.extended_inputs()
        previous_outputs = prev.extended_outputs()
        u_head = previous_inputs.window(-n + 1, L - 1).reindexed(-n)
        init = dict(
            init_u=u_head.window(-n, -1),
            init_yn=neighbor_msg.shifted_window(-n, -1),
            init_y=measured_y,
        )
        y_init = measured_y.reindexed(-n)

        partial = BehaviorService.datadriven_simulate(
            cfg.sim_data,
            new_u=u_head.window(0, L - 2),
            new_yn=neighbor_msg.shifted_window(0, L - 3) if L > 2 else None,
            horizon=L - 1,
            tol=cfg.sim_tol,
            **init,
        )
        y_partial = y_init.append(partial)
        xi_hat = ExtendedState(
            u_head.window(L - n - 1, L - 2).values,
            neighbor_msg.shifted_window(L - n - 1, L - 2).values,
            y_partial.window(L - n - 1, L - 2).values,
        )
        u_last = cfg.terminal.control(xi_hat.vector)
        u_hat = u_head.append(Trajectory(u_last.reshape(1, -1), L - 1))

        full = BehaviorService.datadriven_simulate(
            cfg.sim_data,
            new_u=u_hat.window(0, L - 1),
            new_yn=neighbor_msg.shifted_window(0, L - 2),
            horizon=L,
            tol=cfg.sim_tol,
            **init,
        )
        y_hat = y_init.append(full)

        reference = ConsistencyReference(
            u_hat=u_hat.window(0, L - 1),
            y_hat=y_hat.window(0, L - 1),
            u_prev=previous_inputs.window(1, L).reindexed(0),
            y_prev=previous_outputs.window(1, L).reindexed(0),
        )
        xi_gap = xi_hat.vector - prev.xi_L.vector
        y_gaps = [
            float(np.sqrt(max(0.0, (reference.y_hat.at(k) - reference.y_prev.at(k)) @ cfg.Q
                                    @ (reference.y_hat.at(k) - reference.y_prev.at(k)))))
            for k in range(L)
        ]
        return Candidate(
            u_hat=u_hat,
            y_hat=y_hat,
            xi_hat=xi_hat,
            reference=reference,
            xi_deviation=float(np.sqrt(max(0.0, xi_gap @ cfg.terminal.P @ xi_gap))),
            y_deviation=max(y_gaps),
        )

    @staticmethod
    def check_candidate(
        cfg: AgentConfig,
        candidate: Candidate,
        u_init: Trajectory,
        y_init: Trajectory,
        neighbor_msg: NeighborTrajectory,
    ) -> ConstraintReport:
        """
        Re-check the candidate as a plan of the next local problem

        The consistency margins of the candidate plan are exactly omega, since
        its distance to the previous plan is the bound itself.
        """
        u_plan, y_plan = AgentService.reference_plan(u_init, y_init, candidate.reference)
        return AgentService.check_constraints(cfg, u_plan, y_plan, u_init, y_init, neighbor_msg, candidate.reference)

    @staticmethod
    def candidate_cost(
        cfg: AgentConfig,
        candidate: Candidate,
        u_init: Trajectory,
        y_init: Trajectory,
        neighbor_msg: NeighborTrajectory,
    ) -> float:
        """Cost of the candidate plan in the next local problem, an upper bound of its optimum"""
        L, n = cfg.L, cfg.n
        u_plan, y_plan = AgentService.reference_plan(u_init, y_init, candidate.reference)
        _, y_neighbors_terminal = AgentService._neighbor_windows(cfg, neighbor_msg)
        xi_L = ExtendedState(
            u_plan.window(L - n, L - 1).values,
            y_neighbors_terminal.values,
            y_plan.window(L - n, L - 1).values,
        )
        return AgentService.plan_cost(cfg, u_plan, y_plan, xi_L)

    @staticmethod
    def initial_reference(u_hat: Trajectory, y_hat: Trajectory, L: int) -> ConsistencyReference:
        """Reference at t = 0: the bootstrap candidate stands in for the previous plan"""
        u = u_hat.window(0, L - 1)
        y = y_hat.window(0, L - 1)
        return ConsistencyReference(u_hat=u, y_hat=y, u_prev=u, y_prev=y)

    @staticmethod
    def reference_plan(
        u_init: Trajectory,
        y_init: Trajectory,
        reference: ConsistencyReference,
    ) -> Tuple[Trajectory, Trajectory]:
        """Candidate plan over [-n, L - 1]: measured window followed by (u_hat, y_hat)"""
        return (
            u_init.reindexed(-u_init.length).append(reference.u_hat),
            y_init.reindexed(-y_init.length).append(reference.y_hat),
        )
