import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose

from app.core.errors import ArtifactError, DimensionError, ExcitationError
from app.models.network import CouplingGraph, NetworkModel, SubsystemModel
from app.models.signals import Trajectory
from app.services.plant_service import PlantService
from app.services.signal_service import SignalService


def test_chain_matrices_follow_the_mass_spring_damper_model(chain3):
    middle = chain3.subsystems[2]
    assert_allclose(middle.A, [[1.0, 0.2], [-0.2 * 2.5, 1.0 - 0.2 * 0.75]])
    assert_allclose(middle.C, [[0.2, 0.0]])
    assert_allclose(middle.coupling[1], [[0.0], [1.25]])
    assert chain3.graph.neighbors(1) == (2,)
    assert chain3.graph.neighbors(2) == (1, 3)
    assert sorted(chain3.graph.edges()) == [(1, 2), (2, 1), (2, 3), (3, 2)]


def test_zero_gain_gives_isolated_nodes(isolated3):
    assert isolated3.graph.edges() == []
    for i in isolated3.graph.nodes:
        assert_allclose(isolated3.subsystems[i].A, [[1.0, 0.2], [0.0, 1.0 - 0.2 * 0.75]])
        assert isolated3.neighbor_dim(i) == 0


def test_single_node_network():
    model = PlantService.build_chain_network(1)
    assert model.graph.nodes == (1,)
    assert model.graph.neighbors(1) == ()
    assert model.graph.M == 1 and model.graph.edges() == []
    assert CouplingGraph((4,), {}).M == 1
    with pytest.raises(DimensionError):
        CouplingGraph((), {})


def test_step_from_origin_with_zero_input_stays_at_origin(chain3):
    outputs = PlantService.step_network(chain3, {i: [0.0] for i in chain3.graph.nodes})
    for i in chain3.graph.nodes:
        assert_allclose(outputs[i], [0.0])
        assert_allclose(chain3.states[i], [0.0, 0.0])


def test_step_uses_neighbor_outputs_of_the_same_instant():
    model = PlantService.build_chain_network(2, initial_states={1: [1.0, 0.0], 2: [0.0, 0.0]})
    outputs = PlantService.step_network(model, {1: [0.0], 2: [0.0]})
    assert_allclose(outputs[1], [0.2])
    # node 2 receives k_21 * y^1 = 1.25 * 0.2 in its velocity
    assert_allclose(model.states[2], [0.0, 0.25])
    assert_allclose(model.states[1], [1.0, -0.2 * 1.25])


def test_step_rejects_wrong_input_size(chain3):
    with pytest.raises(DimensionError):
        PlantService.step_network(chain3, {1: [0.0, 1.0], 2: [0.0], 3: [0.0]})


def test_simulate_matches_global_matrices(chain3, rng):
    for i in chain3.graph.nodes:
        chain3.states[i] = rng.standard_normal(2)
    x0 = np.concatenate([chain3.states[i] for i in chain3.graph.nodes])
    inputs = {i: rng.uniform(-1, 1, (6, 1)) for i in chain3.graph.nodes}
    recorded = PlantService.simulate(chain3, inputs)

    A, C = PlantService.assemble_global_matrices(chain3)
    B = np.zeros((6, 3))
    for k in range(3):
        B[2 * k + 1, k] = 1.0
    x = x0
    for t in range(6):
        u = np.array([inputs[i][t, 0] for i in chain3.graph.nodes])
        assert_allclose(C @ x, [recorded[i]["y"][t, 0] for i in chain3.graph.nodes], atol=1e-12)
        x = A @ x + B @ u
    assert_allclose(x, np.concatenate([chain3.states[i] for i in chain3.graph.nodes]), atol=1e-12)
    assert_allclose(recorded[2]["y_neighbors"], np.hstack([recorded[1]["y"], recorded[3]["y"]]))


def global_input_matrix(model):
    return scipy.linalg.block_diag(*[model.subsystems[i].B for i in model.graph.nodes])


@pytest.mark.parametrize("M,seed", [(2, 0), (3, 1), (5, 2), (5, 3), (8, 4)])
def test_coupled_nodes_match_global_matrices_on_random_runs(M, seed):
    rng = np.random.default_rng(seed)
    model = PlantService.build_chain_network(M, coupling_gain=rng.uniform(0.5, 2.0))
    PlantService.randomize_states(model, [-1.0, 1.0], seed=seed)
    x = np.concatenate([model.states[i] for i in model.graph.nodes])
    inputs = {i: rng.uniform(-2, 2, (10, 1)) for i in model.graph.nodes}
    recorded = PlantService.simulate(model, inputs)

    A, C = PlantService.assemble_global_matrices(model)
    B = global_input_matrix(model)
    for t in range(10):
        u = np.concatenate([inputs[i][t] for i in model.graph.nodes])
        assert_allclose(C @ x, np.concatenate([recorded[i]["y"][t] for i in model.graph.nodes]), atol=1e-10)
        x = A @ x + B @ u
        assert_allclose(x, np.concatenate([recorded[i]["x"][t + 1] for i in model.graph.nodes]), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_network_response_superposes(seed):
    rng = np.random.default_rng(seed)
    model = PlantService.build_chain_network(4)
    nodes = model.graph.nodes
    starts = [{i: rng.standard_normal(2) for i in nodes} for _ in range(2)]
    inputs = [{i: rng.uniform(-2, 2, (8, 1)) for i in nodes} for _ in range(2)]
    a, b = rng.uniform(-2, 2, 2)

    def run(start, u):
        plant = model.copy()
        plant.states.update({i: np.array(x) for i, x in start.items()})
        return PlantService.simulate(plant, u)

    separate = [run(starts[k], inputs[k]) for k in range(2)]
    combined = run(
        {i: a * starts[0][i] + b * starts[1][i] for i in nodes},
        {i: a * inputs[0][i] + b * inputs[1][i] for i in nodes},
    )
    for i in nodes:
        for key in ("y", "x", "y_neighbors"):
            assert_allclose(combined[i][key], a * separate[0][i][key] + b * separate[1][i][key], atol=1e-10)


def test_single_step_superposes(chain3, rng):
    first = {i: rng.standard_normal(2) for i in chain3.graph.nodes}
    second = {i: rng.standard_normal(2) for i in chain3.graph.nodes}
    u1 = {i: rng.uniform(-1, 1, 1) for i in chain3.graph.nodes}
    u2 = {i: rng.uniform(-1, 1, 1) for i in chain3.graph.nodes}

    def step(states, u):
        plant = chain3.copy()
        plant.states.update(states)
        y = PlantService.step_network(plant, u)
        return y, plant.states

    y1, x1 = step(first, u1)
    y2, x2 = step(second, u2)
    y, x = step({i: first[i] + second[i] for i in first}, {i: u1[i] + u2[i] for i in u1})
    for i in chain3.graph.nodes:
        assert_allclose(y[i], y1[i] + y2[i], atol=1e-12)
        assert_allclose(x[i], x1[i] + x2[i], atol=1e-12)


def test_collect_data_is_persistently_exciting(chain3_data):
    order = PlantService.required_pe_order(5, 2)
    assert order == 10
    for i, data in chain3_data.items():
        assert data.N == 100
        stacked = SignalService.stack_signals([data.u_d, data.y_neighbors_d])
        assert SignalService.check_persistent_excitation(stacked, order)
        assert np.all(np.abs(data.u_d.values) <= 2.0)
    assert chain3_data[2].neighbor_dim == 2
    assert chain3_data[1].neighbors == (2,)


def test_collect_data_is_deterministic(chain3):
    first = PlantService.collect_data(chain3, 60, 5, 2, seed=3)
    second = PlantService.collect_data(chain3, 60, 5, 2, seed=3)
    for i in chain3.graph.nodes:
        assert np.array_equal(first[i].y_d.values, second[i].y_d.values)


def test_collect_data_does_not_move_the_model(chain3):
    PlantService.collect_data(chain3, 60, 5, 2, seed=0)
    for i in chain3.graph.nodes:
        assert_allclose(chain3.states[i], [0.0, 0.0])


def test_collect_data_too_short_raises(chain3):
    with pytest.raises(ExcitationError) as excinfo:
        PlantService.collect_data(chain3, 12, 5, 2, seed=0, retry_cap=1)
    assert excinfo.value.exit_code == 2
    assert excinfo.value.details["attempts"] == 2


def test_random_state_respects_component_ranges(rng):
    for _ in range(50):
        x = PlantService.random_state(rng, [0.7, 3.3], 2)
        assert abs(x[0]) <= 0.7 and abs(x[1]) <= 3.3


def test_extended_state_from_history():
    u = Trajectory(np.arange(5.0).reshape(-1, 1), -2)
    y_neighbors = Trajectory(np.arange(10.0).reshape(5, 2), -2)
    y = Trajectory(10 + np.arange(5.0).reshape(-1, 1), -2)
    xi = PlantService.extended_state_from_history(u, y_neighbors, y, 1, 2)
    assert_allclose(xi.u_window.reshape(-1), [1.0, 2.0])
    assert_allclose(xi.y_neighbors_window, [[2.0, 3.0], [4.0, 5.0]])
    assert_allclose(xi.vector, [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 11.0, 12.0])
    assert xi.dims == (1, 2, 1)


def test_extended_state_outside_history():
    u = Trajectory(np.zeros(3), 0)
    with pytest.raises(ValueError):
        PlantService.extended_state_from_history(u, u, u, 1, 2)


def test_structural_assumptions_hold_for_chain(chain3):
    report = PlantService.verify_structural_assumptions(chain3)
    assert report["success"]
    assert all(report["controllable"].values())


def test_structural_assumptions_flag_defective_node():
    sub = SubsystemModel(np.eye(2), [[1.0], [0.0]], [[1.0, 0.0]], [[0.0]])
    model = NetworkModel(CouplingGraph((1,), {}), {1: sub})
    report = PlantService.verify_structural_assumptions(model)
    assert not report["success"]
    assert report["controllable"] == {1: False}
    assert not report["observable"]


def test_dataset_csv_round_trip(tmp_path, chain3_data):
    data = chain3_data[2]
    path = tmp_path / "node_2.csv"
    PlantService.save_dataset(data, path)
    header = path.read_text().splitlines()[0]
    assert header == "u[0],y[0],y_neighbors[0],y_neighbors[1]"
    loaded = PlantService.load_dataset(path, 2, (1, 3))
    assert np.array_equal(loaded.u_d.values, data.u_d.values)
    assert np.array_equal(loaded.y_neighbors_d.values, data.y_neighbors_d.values)


def test_dataset_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        PlantService.load_dataset(tmp_path / "missing.csv", 1, ())
