from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from app.models.network import DataSet
from app.models.signals import HankelMatrix


@dataclass(frozen=True)
class BehavioralPredictor:
    """
    Stacked Hankel matrices [H_u; H_yn; H_y] of one node at depth L + n

    H_yn is built on y^-i_[0, N-2] with one block row less, so all three
    blocks have N - L - n + 1 columns. `row_basis` / `null_basis` are
    orthonormal bases of range(H) and its complement, used to impose
    H alpha = w without redundant rows.
    """
    H_u: HankelMatrix
    H_yn: HankelMatrix
    H_y: HankelMatrix
    m: int
    p: int
    neighbor_dim: int
    n: int
    L: int
    row_basis: np.ndarray = field(repr=False)
    null_basis: np.ndarray = field(repr=False)

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.H_u.entries, self.H_yn.entries, self.H_y.entries])

    @property
    def columns(self) -> int:
        return self.H_u.columns

    @property
    def depth(self) -> int:
        return self.L + self.n


@dataclass(frozen=True)
class SimulationData:
    """Recorded data of one node prepared for data-driven simulation with lag n"""
    data: DataSet
    n: int
    _matrices: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self) -> int:
        return self.data.m

    @property
    def p(self) -> int:
        return self.data.p

    @property
    def neighbor_dim(self) -> int:
        return self.data.neighbor_dim

    def cached(self, horizon: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        return self._matrices.get(horizon)

    def store(self, horizon: int, matrices: Tuple[np.ndarray, np.ndarray]) -> None:
        self._matrices[horizon] = matrices
