from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.errors import ArtifactError, DimensionError, ExcitationError
from app.models.network import CouplingGraph, DataSet, ExtendedState, NetworkModel, SubsystemModel
from app.models.signals import Trajectory
from app.services.signal_service import SignalService
import logging

logger = logging.getLogger(__name__)

Excitation = Union[Tuple[float, float], Mapping[int, Tuple[float, float]]]


class PlantService:

    @staticmethod
    def build_chain_network(
        M: int,
        mass: float = 1.0,
        damping: float = 0.75,
        coupling_gain: float = 1.25,
        dt: float = 0.2,
        initial_states: Optional[Mapping[int, Sequence[float]]] = None,
    ) -> NetworkModel:
        """
        Chain of mass-spring-damper subsystems coupled through neighbor positions

        Node i has neighbors i-1 and i+1 (where they exist), spring constant
        k_i = sum_j k_ij, and measures the scaled position y = [dt/m, 0] x.
        A zero coupling gain yields M isolated nodes without edges.
        """
        graph = CouplingGraph.chain(M) if coupling_gain != 0 else CouplingGraph(tuple(range(1, M + 1)), {})
        subsystems: Dict[int, SubsystemModel] = {}
        for i in graph.nodes:
            neighbors = graph.neighbors(i)
            k_i = coupling_gain * len(neighbors)
            A = [[1.0, dt], [-dt * k_i / mass, 1.0 - dt * damping / mass]]
            coupling = {j: [[0.0], [coupling_gain]] for j in neighbors}
            subsystems[i] = SubsystemModel(A, [[0.0], [1.0]], [[dt / mass, 0.0]], [[0.0]], coupling)
        states = {i: np.asarray(x, dtype=float) for i, x in (initial_states or {}).items()}
        logger.info(f"Built chain network with {M} subsystems")
        return NetworkModel(graph, subsystems, states)

    @staticmethod
    def step_network(model: NetworkModel, inputs: Mapping[int, Sequence[float]]) -> Dict[int, np.ndarray]:
        """
        Advance the network by one step

        All outputs y_t are computed before any state moves, since x_{t+1}^i
        depends on the neighbors' y_t^j.

        Returns:
            dict: node -> output y_t
        """
        u: Dict[int, np.ndarray] = {}
        for i in model.graph.nodes:
            u_i = np.asarray(inputs[i], dtype=float).reshape(-1)
            if u_i.size != model.subsystems[i].m:
                raise DimensionError("Input has wrong size", {"node": i, "size": u_i.size, "m": model.subsystems[i].m})
            u[i] = u_i

        outputs = {
            i: sub.C @ model.states[i] + sub.D @ u[i]
            for i, sub in model.subsystems.items()
        }
        next_states = {}
        for i in model.graph.nodes:
            sub = model.subsystems[i]
            x_next = sub.A @ model.states[i] + sub.B @ u[i]
            for j, B_ij in sub.coupling.items():
                x_next = x_next + B_ij @ outputs[j]
            next_states[i] = x_next
        model.states.update(next_states)
        return outputs

    @staticmethod
    def simulate(model: NetworkModel, inputs: Mapping[int, np.ndarray]) -> Dict[int, Dict[str, np.ndarray]]:
        """
        Run the plant open loop over an input sequence (mutates model.states)

        Args:
            model: Network to drive
            inputs: node -> (T, m) array of inputs

        Returns:
            dict: node -> {"y": (T, p), "x": (T + 1, n), "y_neighbors": (T, |N_i| p)}
        """
        horizon = {np.asarray(seq).shape[0] for seq in inputs.values()}
        if len(horizon) != 1:
            raise DimensionError("All input sequences must have the same length", {"lengths": sorted(horizon)})
        T = horizon.pop()
        states = {i: [model.states[i].copy()] for i in model.graph.nodes}
        outputs = {i: [] for i in model.graph.nodes}
        for t in range(T):
            y_t = PlantService.step_network(model, {i: np.asarray(inputs[i])[t] for i in model.graph.nodes})
            for i in model.graph.nodes:
                outputs[i].append(y_t[i])
                states[i].append(model.states[i].copy())

        result: Dict[int, Dict[str, np.ndarray]] = {}
        for i in model.graph.nodes:
            y = np.array(outputs[i]).reshape(T, model.subsystems[i].p)
            result[i] = {"y": y, "x": np.array(states[i])}
        for i in model.graph.nodes:
            parts = [result[j]["y"] for j in model.graph.neighbors(i)]
            result[i]["y_neighbors"] = np.hstack(parts) if parts else np.zeros((T, 0))
        return result

    @staticmethod
    def random_state(
        rng: np.random.Generator,
        initial_range: Union[float, Sequence[float]],
        n: int,
    ) -> np.ndarray:
        """Uniform draw from the box [-r, r]; r is a scalar or one bound per component"""
        bound = np.broadcast_to(np.abs(np.asarray(initial_range, dtype=float)), (n,))
        return rng.uniform(-bound, bound)

    @staticmethod
    def randomize_states(
        model: NetworkModel,
        initial_range: Union[float, Sequence[float]],
        seed: int,
    ) -> None:
        """Draw all initial states of the network (mutates model.states)"""
        rng = np.random.default_rng(seed)
        for i in model.graph.nodes:
            model.states[i] = PlantService.random_state(rng, initial_range, model.subsystems[i].n)

    @staticmethod
    def required_pe_order(L: int, n: int) -> int:
        """Order needed for simulations over L + 1 new samples with an n-step initial window"""
        return L + 1 + 2 * n

    @staticmethod
    def collect_data(
        model: NetworkModel,
        N: int,
        L: int,
        n: int,
        excitation: Excitation = (-2.0, 2.0),
        seed: int = 0,
        retry_cap: Optional[int] = None,
        initial_range: Union[float, Sequence[float]] = 1.0,
    ) -> Dict[int, DataSet]:
        """
        Excite the network with i.i.d. uniform inputs and record one data set per node

        The stacked signal [u^i; y^-i] of every node must be persistently exciting
        of order L + 1 + 2n; on failure the experiment is repeated with seed + 1.
        Initial states are drawn uniformly from [-r, r] per component, r = initial_range.

        Raises:
            ExcitationError: if some node is still not excited after retry_cap attempts
        """
        retry_cap = settings.PE_RETRY_CAP if retry_cap is None else retry_cap
        order = PlantService.required_pe_order(L, n)
        failing = None

        for attempt in range(retry_cap + 1):
            rng = np.random.default_rng(seed + attempt)
            plant = model.copy()
            for i in plant.graph.nodes:
                plant.states[i] = PlantService.random_state(rng, initial_range, plant.subsystems[i].n)
            inputs = {}
            for i in plant.graph.nodes:
                low, high = excitation[i] if isinstance(excitation, Mapping) else excitation
                inputs[i] = rng.uniform(low, high, (N, plant.subsystems[i].m))
            recorded = PlantService.simulate(plant, inputs)

            data: Dict[int, DataSet] = {}
            failing = None
            for i in plant.graph.nodes:
                data[i] = DataSet(
                    node=i,
                    neighbors=plant.graph.neighbors(i),
                    u_d=Trajectory(inputs[i]),
                    y_d=Trajectory(recorded[i]["y"]),
                    y_neighbors_d=Trajectory(recorded[i]["y_neighbors"]),
                )
                stacked = SignalService.stack_signals([data[i].u_d, data[i].y_neighbors_d])
                if order > N or not SignalService.check_persistent_excitation(stacked, order):
                    failing = i
                    break

            if failing is None:
                logger.info(f"Collected {N} samples for {len(data)} nodes (seed {seed + attempt}), PE order {order} holds")
                return data
            logger.warning(f"PE of order {order} fails for node {failing} with seed {seed + attempt}, retrying")

        raise ExcitationError(
            "Data is not persistently exciting",
            {"node": failing, "order": order, "attempts": retry_cap + 1},
        )

    @staticmethod
    def extended_state_from_history(
        u: Trajectory,
        y_neighbors: Trajectory,
        y: Trajectory,
        t: int,
        n: int,
    ) -> ExtendedState:
        """Stack the windows [t - n, t - 1] of the three histories"""
        return ExtendedState(
            u.window(t - n, t - 1).values,
            y_neighbors.window(t - n, t - 1).values,
            y.window(t - n, t - 1).values,
        )

    @staticmethod
    def global_extended_state(states: Mapping[int, ExtendedState]) -> np.ndarray:
        return np.concatenate([states[i].vector for i in sorted(states)])

    @staticmethod
    def assemble_global_matrices(model: NetworkModel) -> Tuple[np.ndarray, np.ndarray]:
        """Global (A, C) with off-diagonal blocks A_ij = B_ij C_jj"""
        nodes = model.graph.nodes
        offsets = np.cumsum([0] + [model.subsystems[i].n for i in nodes])
        index = {i: k for k, i in enumerate(nodes)}
        A = np.zeros((offsets[-1], offsets[-1]))
        for i in nodes:
            sub = model.subsystems[i]
            rows = slice(offsets[index[i]], offsets[index[i] + 1])
            A[rows, rows] = sub.A
            for j, B_ij in sub.coupling.items():
                cols = slice(offsets[index[j]], offsets[index[j] + 1])
                A[rows, cols] = B_ij @ model.subsystems[j].C
        C = scipy.linalg.block_diag(*[model.subsystems[i].C for i in nodes])
        return A, C

    @staticmethod
    def verify_structural_assumptions(model: NetworkModel, rank_tol: float = 1e-9) -> Dict[str, Any]:
        """
        Check per-node controllability of (A_ii, [B_ii B_ij ...]) and global observability

        Controllability uses the Kalman rank test; observability of the assembled
        (A, C) uses the PBH test, which stays well conditioned for large networks.

        Returns:
            dict: success flag plus per-node and global results
        """
        controllable: Dict[int, bool] = {}
        for i in model.graph.nodes:
            sub = model.subsystems[i]
            B_i = np.hstack([sub.B] + list(sub.coupling.values()))
            blocks = [B_i]
            for _ in range(sub.n - 1):
                blocks.append(sub.A @ blocks[-1])
            ctrb = np.hstack(blocks)
            controllable[i] = SignalService.numerical_rank(ctrb, rank_tol) == sub.n

        A, C = PlantService.assemble_global_matrices(model)
        observable = True
        for eigenvalue in np.linalg.eigvals(A):
            pbh = np.vstack([A - eigenvalue * np.eye(A.shape[0]), C])
            if SignalService.numerical_rank(pbh, rank_tol) < A.shape[0]:
                observable = False
                break

        failing = [i for i, ok in controllable.items() if not ok]
        if failing:
            logger.warning(f"Controllability fails for nodes {failing}")
        if not observable:
            logger.warning("Global (A, C) is not observable")
        return {
            "success": not failing and observable,
            "controllable": controllable,
            "all_controllable": not failing,
            "observable": observable,
        }

    @staticmethod
    def save_dataset(data: DataSet, path: Union[str, Path]) -> None:
        """Write u[..], y[..], y_neighbors[..] columns, one row per time index"""
        header = (
            [f"u[{k}]" for k in range(data.m)]
            + [f"y[{k}]" for k in range(data.p)]
            + [f"y_neighbors[{k}]" for k in range(data.neighbor_dim)]
        )
        table = np.hstack([data.u_d.values, data.y_d.values, data.y_neighbors_d.values])
        np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")

    @staticmethod
    def load_dataset(path: Union[str, Path], node: int, neighbors: Sequence[int]) -> DataSet:
        path = Path(path)
        if not path.exists():
            raise ArtifactError("Data file not found", {"path": str(path)})
        with path.open() as handle:
            header = handle.readline().strip().split(",")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.shape[1] != len(header):
            raise ArtifactError("Data file columns do not match its header", {"path": str(path)})
        columns = {prefix: [k for k, name in enumerate(header) if name.startswith(f"{prefix}[")]
                   for prefix in ("u", "y", "y_neighbors")}
        return DataSet(
            node=node,
            neighbors=tuple(neighbors),
            u_d=Trajectory(table[:, columns["u"]]),
            y_d=Trajectory(table[:, columns["y"]]),
            y_neighbors_d=Trajectory(table[:, columns["y_neighbors"]]),
        )
