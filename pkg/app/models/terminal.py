from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from app.core.errors import TerminalDesignError


@dataclass(frozen=True)
class ShiftStructure:
    """
    Known part of the extended-state recursion

        xi+ = A_bar xi + B_u u + B_yn y^-i + B_w w,   w = Delta [xi; u]

    A_bar shifts each of the three windows by one sample, B_u / B_yn write the
    newest input / neighbor output into the last slot of their window and B_w
    selects the last own-output slot, the only block row that is unknown.
    """
    A_bar: np.ndarray
    B_u: np.ndarray
    B_yn: np.ndarray
    B_w: np.ndarray
    n: int
    m: int
    neighbor_dim: int
    p: int

    @property
    def state_dim(self) -> int:
        return self.n * (self.m + self.neighbor_dim + self.p)

    @property
    def T_y(self) -> np.ndarray:
        """y_t = T_y xi_{t+1}"""
        return self.B_w.T

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return self.n, self.m, self.neighbor_dim, self.p


@dataclass(frozen=True)
class SynthesisData:
    """Extended-state data matrices over the columns t = n, ..., N - 1"""
    Xi: np.ndarray
    Xi_plus: np.ndarray
    U: np.ndarray
    Y_n: np.ndarray
    Z: np.ndarray
    M_res: np.ndarray

    @property
    def columns(self) -> int:
        return self.Xi.shape[1]


@dataclass(frozen=True)
class TerminalIngredients:
    """
    Terminal cost ||xi||_P^2, terminal controller K xi and terminal set {||xi||_P^2 <= epsilon}

    eta is the decrease rate for the unweighted ||xi||^2 term, eta_bar the
    P-weighted rate certified by the data-driven closed loop.
    """
    P: np.ndarray
    K: np.ndarray
    epsilon: float
    eta: float
    theta: float
    eta_bar: float = 0.0
    report: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        K = np.atleast_2d(np.array(self.K, dtype=float))
        if P.ndim != 2 or P.shape[0] != P.shape[1] or K.shape[1] != P.shape[0]:
            raise TerminalDesignError("P must be square and match K", {"P": P.shape, "K": K.shape})
        if not np.allclose(P, P.T, atol=1e-9 * max(1.0, np.abs(P).max())):
            raise TerminalDesignError("P must be symmetric")
        P = (P + P.T) / 2
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise TerminalDesignError("P must be positive definite", {"lambda_min": float(np.linalg.eigvalsh(P)[0])})
        if not self.epsilon > 0 or not self.eta > 0:
            raise TerminalDesignError("epsilon and eta must be positive", {"epsilon": self.epsilon, "eta": self.eta})
        if not 0 < self.theta < 1:
            raise TerminalDesignError("theta must lie in (0, 1)", {"theta": self.theta})
        P.setflags(write=False)
        K.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", K)

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    @property
    def theta_lower_bound(self) -> float:
        """Smallest tightening factor that keeps the candidate terminal state inside the set"""
        return 1.0 - self.eta / self.lambda_max

    def satisfies_tightening(self, tol: float = 0.0) -> bool:
        return self.theta >= self.theta_lower_bound - tol

    def deviation_threshold(self) -> float:
        """Largest admissible candidate deviation (1 - sqrt(theta)) sqrt(epsilon)"""
        return (1.0 - np.sqrt(self.theta)) * np.sqrt(self.epsilon)

    def terminal_value(self, xi: np.ndarray) -> float:
        xi = np.asarray(xi, dtype=float).reshape(-1)
        return float(xi @ self.P @ xi)

    def in_terminal_set(self, xi: np.ndarray, tightened: bool = True) -> bool:
        level = self.theta * self.epsilon if tightened else self.epsilon
        return self.terminal_value(xi) <= level

    def control(self, xi: np.ndarray) -> np.ndarray:
        return self.K @ np.asarray(xi, dtype=float).reshape(-1)
