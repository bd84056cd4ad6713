from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from app.core.errors import DimensionError
from app.models.signals import Trajectory


def _matrix(value, rows: int = None, cols: int = None, name: str = "matrix") -> np.ndarray:
    array = np.atleast_2d(np.array(value, dtype=float))
    if rows is not None and array.shape[0] != rows or cols is not None and array.shape[1] != cols:
        raise DimensionError(f"{name} has wrong shape", {"shape": array.shape, "expected": (rows, cols)})
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SubsystemModel:
    """x+ = A x + B u + sum_j coupling[j] y^j,  y = C x + D u"""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    coupling: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        A = _matrix(self.A, name="A")
        n = A.shape[0]
        if A.shape[1] != n:
            raise DimensionError("A must be square", {"shape": A.shape})
        B = _matrix(self.B, rows=n, name="B")
        C = _matrix(self.C, cols=n, name="C")
        D = _matrix(self.D, rows=C.shape[0], cols=B.shape[1], name="D")
        coupling = {int(j): _matrix(B_ij, rows=n, cols=C.shape[0], name=f"B_{j}") for j, B_ij in self.coupling.items()}
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "coupling", dict(sorted(coupling.items())))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class CouplingGraph:
    """
    Directed coupling graph; neighbor_sets[i] lists the j whose output enters node i

    A single node is accepted (M >= 1 rather than M >= 2) so that one-node
    networks work for data generation and PE checks. Such a node has no
    neighbors and the scheme reduces to a plain data-driven MPC.
    """
    nodes: Tuple[int, ...]
    neighbor_sets: Mapping[int, Tuple[int, ...]]

    def __post_init__(self):
        nodes = tuple(int(i) for i in self.nodes)
        if len(set(nodes)) != len(nodes) or not nodes:
            raise DimensionError("Graph nodes must be unique and non-empty", {"nodes": nodes})
        neighbor_sets: Dict[int, Tuple[int, ...]] = {}
        for i in nodes:
            neighbors = tuple(sorted(int(j) for j in self.neighbor_sets.get(i, ())))
            if i in neighbors:
                raise DimensionError("Self-loops are not allowed", {"node": i})
            unknown = [j for j in neighbors if j not in nodes]
            if unknown:
                raise DimensionError("Neighbor is not a node of the graph", {"node": i, "unknown": unknown})
            neighbor_sets[i] = neighbors
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "neighbor_sets", neighbor_sets)

    @classmethod
    def chain(cls, M: int) -> "CouplingGraph":
        nodes = tuple(range(1, M + 1))
        return cls(nodes, {i: tuple(j for j in (i - 1, i + 1) if 1 <= j <= M) for i in nodes})

    @property
    def M(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self.neighbor_sets[i]

    def out_neighbors(self, j: int) -> List[int]:
        """Nodes that receive the output of j"""
        return [i for i in self.nodes if j in self.neighbor_sets[i]]

    def edges(self) -> List[Tuple[int, int]]:
        return [(j, i) for i in self.nodes for j in self.neighbor_sets[i]]


@dataclass
class NetworkModel:
    """Ground-truth coupled plant; `states` is the only mutable part"""
    graph: CouplingGraph
    subsystems: Dict[int, SubsystemModel]
    states: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for i in self.graph.nodes:
            if i not in self.subsystems:
                raise DimensionError("Missing subsystem model", {"node": i})
            if tuple(self.subsystems[i].coupling.keys()) != self.graph.neighbors(i):
                raise DimensionError(
                    "Coupling keys must equal the neighbor set",
                    {"node": i, "coupling": tuple(self.subsystems[i].coupling), "neighbors": self.graph.neighbors(i)},
                )
            state = np.asarray(self.states.get(i, np.zeros(self.subsystems[i].n)), dtype=float).reshape(-1)
            if state.size != self.subsystems[i].n:
                raise DimensionError("State has wrong size", {"node": i, "size": state.size})
            self.states[i] = state

    def copy(self) -> "NetworkModel":
        return NetworkModel(self.graph, dict(self.subsystems), {i: x.copy() for i, x in self.states.items()})

    def neighbor_dim(self, i: int) -> int:
        return sum(self.subsystems[j].p for j in self.graph.neighbors(i))


@dataclass(frozen=True)
class DataSet:
    """Recorded (u, y, y_neighbors) of one node; neighbor outputs stacked in ascending id order"""
    node: int
    neighbors: Tuple[int, ...]
    u_d: Trajectory
    y_d: Trajectory
    y_neighbors_d: Trajectory

    def __post_init__(self):
        lengths = {self.u_d.length, self.y_d.length, self.y_neighbors_d.length}
        if len(lengths) != 1:
            raise DimensionError(
                "Data trajectories must have equal length",
                {"u": self.u_d.length, "y": self.y_d.length, "y_neighbors": self.y_neighbors_d.length},
            )
        object.__setattr__(self, "neighbors", tuple(self.neighbors))

    @property
    def N(self) -> int:
        return self.u_d.length

    @property
    def m(self) -> int:
        return self.u_d.dim

    @property
    def p(self) -> int:
        return self.y_d.dim

    @property
    def neighbor_dim(self) -> int:
        return self.y_neighbors_d.dim


@dataclass(frozen=True)
class ExtendedState:
    """xi_t = col(u_[t-n,t-1], y^-i_[t-n,t-1], y_[t-n,t-1]); each window has shape (n, dim)"""
    u_window: np.ndarray
    y_neighbors_window: np.ndarray
    y_window: np.ndarray

    def __post_init__(self):
        windows = [np.array(w, dtype=float) for w in (self.u_window, self.y_neighbors_window, self.y_window)]
        n = windows[0].shape[0]
        if any(w.ndim != 2 or w.shape[0] != n for w in windows):
            raise DimensionError("Extended-state windows must share the lag n", {"shapes": [w.shape for w in windows]})
        object.__setattr__(self, "u_window", windows[0])
        object.__setattr__(self, "y_neighbors_window", windows[1])
        object.__setattr__(self, "y_window", windows[2])

    @property
    def n(self) -> int:
        return self.u_window.shape[0]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.u_window.shape[1], self.y_neighbors_window.shape[1], self.y_window.shape[1]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u_window.reshape(-1), self.y_neighbors_window.reshape(-1), self.y_window.reshape(-1)])

    @property
    def dim(self) -> int:
        return self.vector.size

    @classmethod
    def from_vector(cls, vector: Sequence[float], n: int, m: int, neighbor_dim: int, p: int) -> "ExtendedState":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        expected = n * (m + neighbor_dim + p)
        if vector.size != expected:
            raise DimensionError("Extended-state vector has wrong size", {"size": vector.size, "expected": expected})
        a, b = n * m, n * (m + neighbor_dim)
        return cls(
            vector[:a].reshape(n, m),
            vector[a:b].reshape(n, neighbor_dim),
            vector[b:].reshape(n, p),
        )
