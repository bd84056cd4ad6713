from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import ConfigError, MpcInfeasibleError
from app.core.solver import QCQP, SolverBackend
from app.models.agent import ConsistencyReference, NeighborTrajectory
from app.models.signals import Trajectory
from app.services.agent_service import AgentService
from app.services.behavior_service import BehaviorService
from app.services.plant_service import PlantService

L = 5
N_LAG = 2


def history(model, node, x0):
    """Hold zero input for n steps from x0 and return (u, y) over [-n, -1]"""
    model.states[node] = np.asarray(x0, dtype=float)
    recorded = PlantService.simulate(model, {i: np.zeros((N_LAG, 1)) for i in model.graph.nodes})
    return Trajectory.zeros(N_LAG, 1, -N_LAG), Trajectory(recorded[node]["y"], -N_LAG)


def no_neighbors():
    return NeighborTrajectory.zeros(L, N_LAG, 0)


def test_config_validation(isolated3_agents):
    cfg = isolated3_agents[1]
    with pytest.raises(ConfigError):
        replace(cfg, L=2)
    with pytest.raises(ConfigError):
        replace(cfg, omega=-1.0)
    with pytest.raises(ConfigError):
        replace(cfg, Q=-np.eye(1))
    with pytest.raises(ConfigError):
        replace(cfg, u_lower=np.array([3.0]))
    assert cfg.state_dim == 4
    assert cfg.in_box([2.0]) and not cfg.in_box([2.1])


def test_shifted_window_reads_one_step_ahead():
    values = Trajectory(np.arange(L + N_LAG, dtype=float).reshape(-1, 1), -N_LAG + 1)
    message = NeighborTrajectory(values)
    window = message.shifted_window(-N_LAG, -1)
    assert window.start_index == -N_LAG
    # receiver index -2 is sender index -1, the first transmitted sample
    assert_allclose(window.flat(), [0.0, 1.0])
    assert_allclose(message.shifted_window(L - 1, L - 1).flat(), [L + N_LAG - 1.0])


def test_solution_at_rest_is_zero(isolated3_agents, qcqp_backend):
    cfg = isolated3_agents[1]
    zeros = Trajectory.zeros(N_LAG, 1, -N_LAG)
    solution = AgentService.solve_local_mpc(cfg, zeros, zeros, no_neighbors(), None, qcqp_backend)
    assert_allclose(solution.u_star.values, 0.0, atol=1e-7)
    assert_allclose(solution.y_star.values, 0.0, atol=1e-7)
    assert solution.cost == pytest.approx(0.0, abs=1e-10)
    assert solution.u_star.start_index == -N_LAG and solution.u_star.end_index == L - 1


@pytest.fixture
def solved(isolated3, isolated3_agents, qcqp_backend):
    cfg = isolated3_agents[2]
    u_init, y_init = history(isolated3, 2, [0.05, -0.1])
    solution = AgentService.solve_local_mpc(cfg, u_init, y_init, no_neighbors(), None, qcqp_backend)
    return isolated3, cfg, u_init, y_init, solution


def test_local_solution_satisfies_every_constraint(solved):
    _, cfg, u_init, y_init, solution = solved
    report = AgentService.check_constraints(cfg, solution.u_star, solution.y_star, u_init, y_init, no_neighbors(), None)
    assert report.success, report.violated
    assert_allclose(solution.u_star.window(-N_LAG, -1).values, u_init.values, atol=1e-7)
    assert_allclose(solution.y_star.window(-N_LAG, -1).values, y_init.values, atol=1e-7)
    assert np.all(np.abs(solution.u_star.window(0, L - 1).values) <= 2.0 + 1e-7)
    assert cfg.terminal.terminal_value(solution.xi_L.vector) <= cfg.terminal.theta * cfg.terminal.epsilon + 1e-6
    assert solution.margins["terminal"] >= -1e-6
    assert solution.cost == pytest.approx(AgentService.plan_cost(cfg, solution.u_star, solution.y_star, solution.xi_L))


def test_prediction_matches_the_plant(solved):
    model, cfg, _, _, solution = solved
    extended = AgentService.extend(cfg, solution, no_neighbors())
    inputs = extended.extended_inputs().window(0, L).values
    recorded = PlantService.simulate(model, {i: inputs for i in model.graph.nodes})
    assert_allclose(extended.extended_outputs().window(0, L).values, recorded[2]["y"], atol=1e-6)


def test_extension_is_a_trajectory_of_the_node(solved):
    _, cfg, _, _, solution = solved
    extended = AgentService.extend(cfg, solution, no_neighbors())
    assert extended.extended
    assert_allclose(extended.u_ext, cfg.terminal.K @ solution.xi_L.vector)
    check = BehaviorService.check_trajectory(
        cfg.sim_data.data,
        extended.extended_inputs(),
        Trajectory.zeros(L + N_LAG, 0),
        extended.extended_outputs(),
        tol=1e-6,
    )
    assert check.is_trajectory
    message = extended.message()
    assert message.start_index == -N_LAG + 1 and message.end_index == L


def test_candidate_reproduces_the_shifted_plan_without_coupling(solved, qcqp_backend):
    model, cfg, u_init, y_init, solution = solved
    extended = AgentService.extend(cfg, solution, no_neighbors())
    measured = PlantService.step_network(model, {i: extended.u_star.at(0) for i in model.graph.nodes})
    y_window = y_init.append(Trajectory(measured[2].reshape(1, -1), 0)).window(-1, 0)
    candidate = AgentService.build_candidate(cfg, extended, no_neighbors(), y_window)

    assert candidate.xi_deviation == pytest.approx(0.0, abs=1e-6)
    assert candidate.y_deviation == pytest.approx(0.0, abs=1e-6)
    assert_allclose(candidate.u_hat.window(-N_LAG, L - 2).values, extended.u_star.window(-N_LAG + 1, L - 1).values)
    assert_allclose(candidate.reference.u_prev.values, extended.extended_inputs().window(1, L).values)

    u_next = u_init.append(Trajectory(extended.u_star.at(0).reshape(1, -1), 0)).window(-1, 0).reindexed(-N_LAG)
    y_next = y_window.reindexed(-N_LAG)
    u_plan, y_plan = AgentService.reference_plan(u_next, y_next, candidate.reference)
    report = AgentService.check_constraints(cfg, u_plan, y_plan, u_next, y_next, no_neighbors(), candidate.reference)
    assert report.success, report.violated
    assert report.margins["consistency_input"] == pytest.approx(cfg.omega, abs=1e-9)
    assert report.margins["consistency_output"] == pytest.approx(cfg.omega, abs=1e-9)
    assert AgentService.check_candidate(cfg, candidate, u_next, y_next, no_neighbors()).margins == report.margins
    planned_cost = AgentService.candidate_cost(cfg, candidate, u_next, y_next, no_neighbors())

    following = AgentService.solve_local_mpc(cfg, u_next, y_next, no_neighbors(), candidate.reference, qcqp_backend)
    assert following.margins["consistency_input"] >= -1e-6
    assert following.cost <= planned_cost + 1e-6
    assert planned_cost <= solution.cost + 1e-6


def test_unreachable_terminal_set_is_infeasible(isolated3, isolated3_agents, qcqp_backend):
    cfg = isolated3_agents[1]
    u_init = Trajectory.zeros(N_LAG, 1, -N_LAG)
    y_init = Trajectory([[50.0], [60.0]], -N_LAG)
    with pytest.raises(MpcInfeasibleError) as excinfo:
        AgentService.solve_local_mpc(cfg, u_init, y_init, no_neighbors(), None, qcqp_backend)
    assert excinfo.value.exit_code == 4
    assert excinfo.value.details["node"] == 1


def test_initial_reference_uses_the_candidate_as_previous_plan():
    u_hat = Trajectory(np.arange(7.0), -N_LAG)
    y_hat = Trajectory(np.arange(7.0) * 2, -N_LAG)
    reference = AgentService.initial_reference(u_hat, y_hat, L)
    assert isinstance(reference, ConsistencyReference)
    assert reference.u_prev.start_index == 0
    assert all(reference.input_bound(k) == 0.0 for k in range(L))
    assert_allclose(reference.y_hat.flat(), [4.0, 6.0, 8.0, 10.0, 12.0])


@pytest.mark.parametrize("x0", [[0.05, -0.1], [0.2, -0.2], [-0.15, 0.1]])
def test_solvers_agree_on_the_local_optimum(isolated3, isolated3_agents, x0):
    clarabel = SolverBackend(QCQP, preferred="CLARABEL", fallbacks=[])
    scs = SolverBackend(QCQP, preferred="SCS", fallbacks=[], feas_tol=1e-7, max_iters=100000)
    if not (clarabel.is_available() and scs.is_available()):
        pytest.skip("needs both CLARABEL and SCS")
    cfg = isolated3_agents[2]
    u_init, y_init = history(isolated3, 2, x0)

    first = AgentService.solve_local_mpc(cfg, u_init, y_init, no_neighbors(), None, clarabel)
    second = AgentService.solve_local_mpc(cfg, u_init, y_init, no_neighbors(), None, scs)
    assert second.cost == pytest.approx(first.cost, rel=1e-3, abs=1e-6)
    assert_allclose(second.u_star.values, first.u_star.values, atol=1e-3)
