from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.errors import DimensionError, InconsistentInitializationError
from app.models.behavior import BehavioralPredictor, SimulationData
from app.models.network import DataSet
from app.models.signals import Trajectory
from app.services.signal_service import SignalService
import logging

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryCheck:
    """Outcome of the Hankel membership test; alpha is the minimum-norm witness"""
    is_trajectory: bool
    alpha: np.ndarray
    residual: float


def _within(residual: float, rhs: np.ndarray, tol: float) -> bool:
    return residual <= tol * max(1.0, float(np.linalg.norm(rhs)))


class BehaviorService:

    @staticmethod
    def build_predictor(data: DataSet, L: int, n: int, rank_tol: float = None) -> BehavioralPredictor:
        """
        Hankel blocks of the local prediction model at depth L + n

        Raises:
            DimensionError: if the data is too short for the requested depth
        """
        rank_tol = settings.RANK_TOL if rank_tol is None else rank_tol
        depth = L + n
        if data.N < depth + 1:
            raise DimensionError("Data too short for predictor depth", {"N": data.N, "depth": depth})
        H_u = SignalService.build_hankel(data.u_d, depth)
        H_yn = SignalService.build_hankel(data.y_neighbors_d.window(0, data.N - 2), depth - 1)
        H_y = SignalService.build_hankel(data.y_d, depth)
        stacked = np.vstack([H_u.entries, H_yn.entries, H_y.entries])

        left, singular_values, _ = scipy.linalg.svd(stacked, full_matrices=True)
        rank = int(np.sum(singular_values > rank_tol * singular_values[0])) if singular_values.size else 0
        logger.debug(f"Predictor for node {data.node}: {stacked.shape} with rank {rank}")
        return BehavioralPredictor(
            H_u=H_u,
            H_yn=H_yn,
            H_y=H_y,
            m=data.m,
            p=data.p,
            neighbor_dim=data.neighbor_dim,
            n=n,
            L=L,
            row_basis=left[:, :rank],
            null_basis=left[:, rank:],
        )

    @staticmethod
    def build_simulation_data(data: DataSet, n: int) -> SimulationData:
        return SimulationData(data=data, n=n)

    @staticmethod
    def check_trajectory(
        data: DataSet,
        u: Trajectory,
        y_n: Optional[Trajectory],
        y: Trajectory,
        tol: float = None,
    ) -> TrajectoryCheck:
        """
        Test whether (u, y_n, y) of length l is a trajectory of the node

        Solves [H_l(u_d); H_{l-1}(y^-i_d[0, N-2]); H_l(y_d)] alpha = col(u, y_n, y)
        in least squares. `y_n` covers one sample less than u and y (None when l = 1).

        Returns:
            TrajectoryCheck: minimum-norm alpha and the residual norm
        """
        tol = settings.SIM_TOL if tol is None else tol
        length = u.length
        if y.length != length or y.dim != data.p or u.dim != data.m:
            raise DimensionError("u and y must match the data dims and each other", {"u": u.values.shape, "y": y.values.shape})
        blocks = [SignalService.build_hankel(data.u_d, length).entries]
        rhs = [u.flat()]
        if length > 1:
            if y_n is None or y_n.length != length - 1 or y_n.dim != data.neighbor_dim:
                raise DimensionError("Neighbor outputs must cover one sample less than u", {"length": length})
            blocks.append(SignalService.build_hankel(data.y_neighbors_d.window(0, data.N - 2), length - 1).entries)
            rhs.append(y_n.flat())
        blocks.append(SignalService.build_hankel(data.y_d, length).entries)
        rhs.append(y.flat())

        # H_{l-1} on N-1 samples has as many columns as H_l on N samples
        matrix = np.vstack(blocks)
        w = np.concatenate(rhs)
        alpha, *_ = scipy.linalg.lstsq(matrix, w)
        residual = float(np.linalg.norm(matrix @ alpha - w))
        return TrajectoryCheck(_within(residual, w, tol), alpha, residual)

    @staticmethod
    def _simulation_matrices(sim: SimulationData, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
        cached = sim.cached(horizon)
        if cached is not None:
            return cached
        data, n = sim.data, sim.n
        N = data.N
        if N - horizon - n + 1 < 1:
            raise DimensionError("Data too short for simulation horizon", {"N": N, "horizon": horizon, "n": n})
        blocks = [SignalService.build_hankel(data.u_d, horizon + n).entries]
        blocks.append(SignalService.build_hankel(data.y_neighbors_d.window(0, N - 2), horizon + n - 1).entries)
        blocks.append(SignalService.build_hankel(data.y_d.window(0, N - horizon - 1), n).entries)
        output_map = SignalService.build_hankel(data.y_d.window(n, N - 1), horizon).entries
        matrices = (np.vstack(blocks), output_map)
        sim.store(horizon, matrices)
        return matrices

    @staticmethod
    def datadriven_simulate(
        sim: SimulationData,
        init_u: Trajectory,
        init_yn: Trajectory,
        init_y: Trajectory,
        new_u: Trajectory,
        new_yn: Optional[Trajectory],
        horizon: int,
        tol: float = None,
    ) -> Trajectory:
        """
        Data-driven simulation of the node's output over [0, horizon - 1]

        Args:
            sim: Recorded data of the node
            init_u, init_yn, init_y: initial window over [-n, -1]
            new_u: inputs over [0, horizon - 1]
            new_yn: neighbor outputs over [0, horizon - 2] (None for horizon 1)
            horizon: number of simulated samples

        Returns:
            Trajectory: simulated outputs indexed from 0

        Raises:
            InconsistentInitializationError: if the window is not a trajectory of the node
        """
        tol = settings.SIM_TOL if tol is None else tol
        n = sim.n
        if horizon < 1:
            raise DimensionError("Simulation horizon must be positive", {"horizon": horizon})
        if init_u.length != n or init_yn.length != n or init_y.length != n:
            raise DimensionError("Initial window must have n samples", {"n": n})
        if new_u.length != horizon:
            raise DimensionError("New inputs must cover the horizon", {"horizon": horizon, "length": new_u.length})

        neighbor_part = [init_yn.values]
        if horizon > 1:
            if new_yn is None or new_yn.length != horizon - 1:
                raise DimensionError("New neighbor outputs must cover horizon - 1 samples", {"horizon": horizon})
            neighbor_part.append(new_yn.values)
        rhs = np.concatenate([
            np.vstack([init_u.values, new_u.values]).reshape(-1),
            np.vstack(neighbor_part).reshape(-1),
            init_y.values.reshape(-1),
        ])

        matrix, output_map = BehaviorService._simulation_matrices(sim, horizon)
        alpha, *_ = scipy.linalg.lstsq(matrix, rhs)
        residual = float(np.linalg.norm(matrix @ alpha - rhs))
        if not _within(residual, rhs, tol):
            raise InconsistentInitializationError(
                "Initial window is not a trajectory of the node",
                {"node": sim.data.node, "residual": residual, "horizon": horizon},
            )
        return Trajectory.from_flat(output_map @ alpha, sim.p, 0)
