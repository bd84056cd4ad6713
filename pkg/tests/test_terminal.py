import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import ArtifactError, TerminalDesignError, WeakCouplingError
from app.models.terminal import TerminalIngredients
from app.services.terminal_service import TerminalService

N_LAG = 2
Q = np.eye(1)
R = np.eye(1)
U_BOX = ([-2.0], [2.0])


@pytest.fixture(scope="module")
def designs(chain3_data):
    """(s, shift, P, K) of an end node and an interior node"""
    result = {}
    for node in (1, 2):
        data = chain3_data[node]
        shift = TerminalService.build_shift_structure(N_LAG, data.m, data.neighbor_dim, data.p)
        s = TerminalService.build_synthesis_data(data, N_LAG, shift)
        P, K = TerminalService.synthesize(s, shift, Q, R)
        result[node] = (s, shift, P, K)
    return result


def test_shift_structure_moves_windows():
    shift = TerminalService.build_shift_structure(2, 1, 2, 1)
    assert shift.state_dim == 8
    xi = np.arange(1.0, 9.0)
    # windows: u = [1, 2], y^-i = [(3, 4), (5, 6)], y = [7, 8]
    assert_allclose(shift.A_bar @ xi, [2, 0, 5, 6, 0, 0, 8, 0])
    assert_allclose(shift.B_u @ [9.0], [0, 9, 0, 0, 0, 0, 0, 0])
    assert_allclose(shift.B_yn @ [9.0, 10.0], [0, 0, 0, 0, 9, 10, 0, 0])
    assert_allclose(shift.T_y @ xi, [8.0])
    assert_allclose(shift.T_y, shift.B_w.T)


def test_synthesis_data_residual_lives_in_the_last_output_slot(chain3_data):
    data = chain3_data[2]
    shift = TerminalService.build_shift_structure(N_LAG, 1, 2, 1)
    s = TerminalService.build_synthesis_data(data, N_LAG, shift)
    assert s.columns == data.N - N_LAG
    assert s.Z.shape == (shift.state_dim + 1, data.N - N_LAG)
    others = np.ones(shift.state_dim, dtype=bool)
    others[-1] = False
    assert_allclose(s.M_res[others], 0.0, atol=1e-12)
    assert_allclose(s.M_res[-1], data.y_d.values[N_LAG:, 0], atol=1e-12)


def test_synthesis_data_too_short(chain3_data):
    data = chain3_data[1]
    short = type(data)(data.node, data.neighbors, data.u_d.window(0, 2), data.y_d.window(0, 2), data.y_neighbors_d.window(0, 2))
    with pytest.raises(TerminalDesignError):
        TerminalService.build_synthesis_data(short, N_LAG)


def test_multiplier_vanishes_on_the_true_uncertainty(chain3_data):
    data = chain3_data[2]
    shift = TerminalService.build_shift_structure(N_LAG, 1, 2, 1)
    s = TerminalService.build_synthesis_data(data, N_LAG, shift)
    multiplier = TerminalService.build_uncertainty_multiplier(s, shift)
    Delta = (shift.B_w.T @ s.M_res) @ np.linalg.pinv(s.Z)
    lifted = np.vstack([shift.B_w, Delta.T])
    assert_allclose(lifted.T @ multiplier @ lifted, 0.0, atol=1e-6 * np.abs(multiplier).max())


@pytest.mark.parametrize("node", [1, 2], ids=["end", "interior"])
def test_lmi_is_feasible_with_positive_definite_cost(designs, node):
    _, shift, P, K = designs[node]
    assert P.shape == (shift.state_dim, shift.state_dim)
    assert K.shape == (1, shift.state_dim)
    assert np.linalg.eigvalsh(P)[0] > 0


@pytest.mark.parametrize("node", [1, 2], ids=["end", "interior"])
def test_decoupled_decrease_on_samples(designs, node, rng):
    s, shift, P, K = designs[node]
    A_cl = TerminalService.closed_loop_from_data(s, shift, K)
    eta_bar = TerminalService.decrease_margin(TerminalService.decrease_matrix(A_cl, P, K, Q, R, shift), P)
    assert eta_bar > 0
    eta = eta_bar * np.linalg.eigvalsh(P)[0]
    for _ in range(1000):
        xi = rng.standard_normal(shift.state_dim)
        xi /= np.linalg.norm(xi)
        xi_next = A_cl @ xi
        y = shift.T_y @ xi_next
        u = K @ xi
        violation = xi_next @ P @ xi_next - xi @ P @ xi + eta * xi @ xi + y @ Q @ y + u @ R @ u
        assert violation <= 1e-8


@pytest.mark.parametrize("node", [1, 2], ids=["end", "interior"])
def test_data_closed_loop_matches_the_plant(designs, chain3, node, rng):
    s, shift, _, K = designs[node]
    A_cl = TerminalService.closed_loop_from_data(s, shift, K)
    sub = chain3.subsystems[node]
    x = rng.standard_normal(2)
    u_hist, y_hist = [], []
    for _ in range(N_LAG):
        u = rng.uniform(-1, 1, 1)
        y_hist.append(sub.C @ x)
        u_hist.append(u)
        x = sub.A @ x + sub.B @ u
    xi = np.concatenate([np.concatenate(u_hist), np.zeros(N_LAG * shift.neighbor_dim), np.concatenate(y_hist)])
    u = K @ xi
    y = sub.C @ x
    expected = np.concatenate([u_hist[-1], u, np.zeros(N_LAG * shift.neighbor_dim), y_hist[-1], y])
    assert_allclose(A_cl @ xi, expected, atol=1e-8)


@pytest.mark.parametrize("node", [1, 2], ids=["end", "interior"])
def test_calibrated_controller_respects_the_input_box(designs, node, rng):
    s, shift, P, K = designs[node]
    terminal = TerminalService.calibrate(P, K, s, shift, Q, R, U_BOX, epsilon=1e-5)
    assert terminal.epsilon <= 1e-5
    assert 0.5 <= terminal.theta < 1
    assert terminal.satisfies_tightening()
    chol = np.linalg.cholesky(terminal.P)
    for _ in range(1000):
        direction = rng.standard_normal(shift.state_dim)
        xi = np.sqrt(terminal.epsilon) * np.linalg.solve(chol.T, direction / np.linalg.norm(direction))
        assert terminal.terminal_value(xi) == pytest.approx(terminal.epsilon)
        assert np.all(np.abs(terminal.control(xi)) <= 2.0)
    assert terminal.report["max_coupling_ratio"] >= 0.0


def test_calibrate_shrinks_epsilon_for_a_tight_box(designs):
    s, shift, P, K = designs[2]
    support = TerminalService.input_support(P, K, 1.0)[0]
    box = ([-support * 1e-3], [support * 1e-3])
    terminal = TerminalService.calibrate(P, K, s, shift, Q, R, box, epsilon=1.0)
    assert terminal.epsilon < 1.0
    assert terminal.report["epsilon_shrinks"] > 0
    assert TerminalService.input_support(P, K, terminal.epsilon)[0] <= support * 1e-3


def test_theta_override_below_bound_is_rejected(designs):
    s, shift, P, K = designs[1]
    terminal = TerminalService.calibrate(P, K, s, shift, Q, R, U_BOX)
    bound = terminal.theta_lower_bound
    if bound <= 1e-6:
        pytest.skip("decrease rate leaves no room below the bound")
    with pytest.raises(TerminalDesignError):
        TerminalService.calibrate(P, K, s, shift, Q, R, U_BOX, theta=bound / 2)


def test_strong_coupling_bound_fails(designs):
    s, shift, P, K = designs[2]
    with pytest.raises(WeakCouplingError):
        TerminalService.calibrate(P, K, s, shift, Q, R, U_BOX, coupling_bound=1e6)


def test_ingredients_validation():
    with pytest.raises(TerminalDesignError):
        TerminalIngredients(P=-np.eye(2), K=np.zeros((1, 2)), epsilon=1.0, eta=0.1, theta=0.5)
    with pytest.raises(TerminalDesignError):
        TerminalIngredients(P=np.eye(2), K=np.zeros((1, 2)), epsilon=1.0, eta=0.1, theta=1.0)
    terminal = TerminalIngredients(P=2 * np.eye(2), K=np.zeros((1, 2)), epsilon=1e-4, eta=0.5, theta=0.81)
    assert terminal.theta_lower_bound == pytest.approx(0.75)
    assert terminal.deviation_threshold() == pytest.approx(0.1 * 1e-2)
    assert terminal.in_terminal_set([0.005, 0.0])


def test_ingredients_file_round_trip(tmp_path, designs):
    s, shift, P, K = designs[2]
    terminal = TerminalService.calibrate(P, K, s, shift, Q, R, U_BOX)
    path = tmp_path / "node_2.json"
    TerminalService.save_ingredients(terminal, shift.dims, 2, path)
    payload, loaded = TerminalService.load_ingredients(path)
    assert payload.node == 2
    assert payload.dims.state_dim == shift.state_dim
    assert np.array_equal(loaded.P, terminal.P)
    assert loaded.theta == terminal.theta and loaded.epsilon == terminal.epsilon


def test_ingredients_file_errors(tmp_path):
    with pytest.raises(ArtifactError):
        TerminalService.load_ingredients(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text('{"node": 1}')
    with pytest.raises(ArtifactError):
        TerminalService.load_ingredients(broken)


@pytest.mark.parametrize("node", [1, 2], ids=["end", "interior"])
def test_agent_terminal_controller_stays_in_the_box_on_the_ellipsoid(chain3_agents, node, rng):
    terminal = chain3_agents[node].terminal
    assert terminal.epsilon <= 1e-5
    chol = np.linalg.cholesky(terminal.P)
    inputs = []
    for k in range(1000):
        direction = rng.standard_normal(terminal.P.shape[0])
        # every other sample lies strictly inside the ellipsoid
        radius = 1.0 if k % 2 == 0 else rng.uniform(0.0, 1.0)
        xi = radius * np.sqrt(terminal.epsilon) * np.linalg.solve(chol.T, direction / np.linalg.norm(direction))
        assert terminal.terminal_value(xi) <= terminal.epsilon * (1 + 1e-9)
        inputs.append(terminal.control(xi))
    assert np.all(np.abs(np.array(inputs)) <= 2.0)
