from typing import List, Sequence

import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.errors import DimensionError
from app.models.signals import HankelMatrix, Trajectory
import logging

logger = logging.getLogger(__name__)


class SignalService:

    @staticmethod
    def build_hankel(x: Trajectory, depth: int) -> HankelMatrix:
        """
        Build the block-Hankel matrix of `x` with `depth` block rows

        Args:
            x: Source trajectory of length N
            depth: Number of block rows L

        Returns:
            HankelMatrix: (dim * L) x (N - L + 1) matrix whose columns are
            consecutive length-L windows of x

        Raises:
            DimensionError: if depth is not positive or exceeds the trajectory length
        """
        if depth < 1:
            raise DimensionError("Hankel depth must be positive", {"depth": depth})
        if depth > x.length:
            raise DimensionError(
                "Hankel depth exceeds trajectory length",
                {"depth": depth, "length": x.length},
            )
        columns = x.length - depth + 1
        windows = np.lib.stride_tricks.sliding_window_view(x.values, depth, axis=0)
        # windows: (columns, dim, depth) -> stack samples of each window into one column
        entries = windows.transpose(0, 2, 1).reshape(columns, depth * x.dim).T
        return HankelMatrix(entries, depth, x.dim)

    @staticmethod
    def numerical_rank(matrix: np.ndarray, rank_tol: float = None) -> int:
        """Number of singular values above rank_tol times the largest one"""
        rank_tol = settings.RANK_TOL if rank_tol is None else rank_tol
        if matrix.size == 0:
            return 0
        singular_values = scipy.linalg.svdvals(matrix)
        if singular_values.size == 0 or singular_values[0] == 0.0:
            return 0
        return int(np.sum(singular_values > rank_tol * singular_values[0]))

    @staticmethod
    def check_persistent_excitation(x: Trajectory, order: int, rank_tol: float = None) -> bool:
        """
        Check whether `x` is persistently exciting of the given order

        Returns:
            bool: True iff rank(H_order(x)) = dim * order
        """
        if order < 1 or order > x.length:
            raise DimensionError("PE order must lie in [1, length]", {"order": order, "length": x.length})
        required = x.dim * order
        if x.length - order + 1 < required:
            logger.debug(f"Too few columns for PE of order {order}: need {required}")
            return False
        hankel = SignalService.build_hankel(x, order)
        rank = SignalService.numerical_rank(hankel.entries, rank_tol)
        return rank == required

    @staticmethod
    def stack_signals(parts: Sequence[Trajectory]) -> Trajectory:
        """Per-sample vertical concatenation col(parts[0]_k, parts[1]_k, ...)"""
        if not parts:
            raise DimensionError("Nothing to stack")
        first = parts[0]
        for part in parts[1:]:
            if part.length != first.length or part.start_index != first.start_index:
                raise DimensionError(
                    "Stacked trajectories must share length and start index",
                    {"length": first.length, "other_length": part.length,
                     "start": first.start_index, "other_start": part.start_index},
                )
        return Trajectory(np.hstack([part.values for part in parts]), first.start_index)

    @staticmethod
    def unstack_signal(x: Trajectory, dims: Sequence[int]) -> List[Trajectory]:
        if sum(dims) != x.dim:
            raise DimensionError("Split dims do not add up", {"dims": list(dims), "dim": x.dim})
        bounds = np.cumsum([0] + list(dims))
        return [
            Trajectory(x.values[:, bounds[i]:bounds[i + 1]], x.start_index)
            for i in range(len(dims))
        ]
