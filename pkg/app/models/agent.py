from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from app.core.errors import ConfigError, DimensionError
from app.models.behavior import BehavioralPredictor, SimulationData
from app.models.network import ExtendedState
from app.models.signals import Trajectory
from app.models.terminal import TerminalIngredients


def _positive_definite(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.atleast_2d(np.array(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1] or not np.allclose(matrix, matrix.T):
        raise ConfigError(f"{name} must be a symmetric matrix", {"shape": matrix.shape})
    if np.linalg.eigvalsh(matrix)[0] <= 0:
        raise ConfigError(f"{name} must be positive definite")
    matrix.setflags(write=False)
    return matrix


@dataclass(frozen=True)
class AgentConfig:
    """Everything one node needs to solve its local problem; immutable after construction"""
    node: int
    neighbors: Tuple[int, ...]
    L: int
    n: int
    Q: np.ndarray
    R: np.ndarray
    omega: float
    u_lower: np.ndarray
    u_upper: np.ndarray
    terminal: TerminalIngredients
    predictor: BehavioralPredictor = field(repr=False)
    sim_data: SimulationData = field(repr=False)
    sim_tol: float = 1e-6
    check_tol: float = 1e-6

    def __post_init__(self):
        if self.L <= self.n:
            raise ConfigError("Horizon L must exceed the lag n", {"L": self.L, "n": self.n})
        if self.omega < 0:
            raise ConfigError("Consistency slack must be nonnegative", {"omega": self.omega})
        object.__setattr__(self, "Q", _positive_definite(self.Q, "Q"))
        object.__setattr__(self, "R", _positive_definite(self.R, "R"))
        lower = np.array(self.u_lower, dtype=float).reshape(-1)
        upper = np.array(self.u_upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape or lower.size != self.m or np.any(lower > upper):
            raise ConfigError("Input box must be nonempty and match the input dimension", {"lower": lower.tolist(), "upper": upper.tolist()})
        object.__setattr__(self, "u_lower", lower)
        object.__setattr__(self, "u_upper", upper)
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        if self.terminal.P.shape[0] != self.state_dim:
            raise DimensionError("Terminal cost does not match the extended state", {"P": self.terminal.P.shape, "state_dim": self.state_dim})

    @property
    def m(self) -> int:
        return self.predictor.m

    @property
    def p(self) -> int:
        return self.predictor.p

    @property
    def neighbor_dim(self) -> int:
        return self.predictor.neighbor_dim

    @property
    def state_dim(self) -> int:
        return self.n * (self.m + self.neighbor_dim + self.p)

    def in_box(self, u: np.ndarray, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float).reshape(-1)
        return bool(np.all(u >= self.u_lower - tol) and np.all(u <= self.u_upper + tol))


@dataclass(frozen=True)
class NeighborTrajectory:
    """Stacked neighbor outputs over [-n + 1, L], indexed relative to the senders' solve time"""
    values: Trajectory

    @classmethod
    def zeros(cls, L: int, n: int, neighbor_dim: int) -> "NeighborTrajectory":
        return cls(Trajectory.zeros(L + n, neighbor_dim, -n + 1))

    def shifted_window(self, first: int, last: int) -> Trajectory:
        """Samples at indices [first, last] relative to the receiver's solve time (one step later)"""
        return self.values.window(first + 1, last + 1).reindexed(first)


@dataclass(frozen=True)
class ConsistencyReference:
    """Candidate (u_hat, y_hat) and previous plan (u_prev, y_prev), all over [0, L - 1]"""
    u_hat: Trajectory
    y_hat: Trajectory
    u_prev: Trajectory
    y_prev: Trajectory

    def __post_init__(self):
        lengths = {self.u_hat.length, self.y_hat.length, self.u_prev.length, self.y_prev.length}
        if len(lengths) != 1:
            raise DimensionError("Consistency trajectories must share the horizon", {"lengths": sorted(lengths)})

    def input_bound(self, k: int) -> float:
        return float(np.sum((self.u_hat.at(k) - self.u_prev.at(k)) ** 2))

    def output_bound(self, k: int) -> float:
        return float(np.sum((self.y_hat.at(k) - self.y_prev.at(k)) ** 2))


@dataclass(frozen=True)
class MpcSolution:
    """Optimal alpha with the induced u*, y* over [-n, L - 1] and the one-step extension"""
    alpha: np.ndarray = field(repr=False)
    u_star: Trajectory
    y_star: Trajectory
    xi_L: ExtendedState
    cost: float
    status: str = "optimal"
    u_ext: Optional[np.ndarray] = None
    y_ext: Optional[np.ndarray] = None
    margins: Dict[str, float] = field(default_factory=dict, compare=False)

    @property
    def extended(self) -> bool:
        return self.u_ext is not None and self.y_ext is not None

    def with_extension(self, u_ext: np.ndarray, y_ext: np.ndarray) -> "MpcSolution":
        return replace(self, u_ext=np.asarray(u_ext, dtype=float), y_ext=np.asarray(y_ext, dtype=float))

    def extended_inputs(self) -> Trajectory:
        """u* over [-n, L] including the extension"""
        if not self.extended:
            raise DimensionError("Solution has not been extended")
        return self.u_star.append(Trajectory(self.u_ext.reshape(1, -1), self.u_star.end_index + 1))

    def extended_outputs(self) -> Trajectory:
        """y* over [-n, L] including the extension"""
        if not self.extended:
            raise DimensionError("Solution has not been extended")
        return self.y_star.append(Trajectory(self.y_ext.reshape(1, -1), self.y_star.end_index + 1))

    def message(self) -> Trajectory:
        """y*_[-n+1, L], the trajectory transmitted to out-neighbors"""
        outputs = self.extended_outputs()
        return outputs.window(outputs.start_index + 1, outputs.end_index)


@dataclass(frozen=True)
class ConstraintReport:
    """Independent re-check of one local problem; a positive violation means the constraint is broken"""
    violations: Dict[str, float]
    margins: Dict[str, float]
    tol: float

    @property
    def success(self) -> bool:
        return all(value <= self.tol for value in self.violations.values())

    @property
    def violated(self) -> Dict[str, float]:
        return {name: value for name, value in self.violations.items() if value > self.tol}


@dataclass(frozen=True)
class Candidate:
    """Shifted candidate at time t with the deviations from the previous optimal plan"""
    u_hat: Trajectory
    y_hat: Trajectory
    xi_hat: ExtendedState
    reference: ConsistencyReference
    xi_deviation: float = 0.0
    y_deviation: float = 0.0
