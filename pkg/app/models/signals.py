from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

from app.core.errors import DimensionError, WindowError

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Trajectory:
    """
    Finite sequence of real vectors indexed from `start_index`

    `values` has shape (length, dim); sample k lives in row k - start_index, so a
    prediction over [-n, L-1] can be addressed with the indices used in the control law.
    """
    values: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise DimensionError("Trajectory values must be a (length, dim) array", {"ndim": values.ndim})
        if values.shape[0] < 1:
            raise DimensionError("Trajectory must contain at least one sample")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "start_index", int(self.start_index))

    @classmethod
    def zeros(cls, length: int, dim: int, start_index: int = 0) -> "Trajectory":
        return cls(np.zeros((length, dim)), start_index)

    @classmethod
    def from_flat(cls, vector: ArrayLike, dim: int, start_index: int = 0) -> "Trajectory":
        """Inverse of `flat`: split a stacked column vector into samples of size `dim`"""
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if dim < 1:
            raise DimensionError("from_flat needs a positive sample dimension", {"dim": dim})
        if vector.size % dim:
            raise DimensionError("Stacked vector length is not a multiple of dim", {"size": vector.size, "dim": dim})
        return cls(vector.reshape(-1, dim), start_index)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def end_index(self) -> int:
        """Index of the last sample (inclusive)"""
        return self.start_index + self.length - 1

    def __len__(self) -> int:
        return self.length

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.values)

    def covers(self, first: int, last: int) -> bool:
        return self.start_index <= first and last <= self.end_index

    def at(self, k: int) -> np.ndarray:
        if not self.covers(k, k):
            raise WindowError(
                f"Index {k} outside trajectory range",
                {"start": self.start_index, "end": self.end_index},
            )
        return self.values[k - self.start_index]

    def window(self, first: int, last: int) -> "Trajectory":
        """Sub-trajectory over [first, last], keeping the original indices"""
        if last < first or not self.covers(first, last):
            raise WindowError(
                f"Window [{first}, {last}] outside trajectory range",
                {"start": self.start_index, "end": self.end_index},
            )
        rows = slice(first - self.start_index, last - self.start_index + 1)
        return Trajectory(self.values[rows], first)

    def flat(self) -> np.ndarray:
        """col(x_k) over the whole trajectory"""
        return self.values.reshape(-1).copy()

    def reindexed(self, start_index: int) -> "Trajectory":
        return Trajectory(self.values, start_index)

    def append(self, other: "Trajectory") -> "Trajectory":
        if other.dim != self.dim:
            raise DimensionError("Cannot append trajectories of different dim", {"dim": self.dim, "other": other.dim})
        if other.start_index != self.end_index + 1:
            raise WindowError(
                "Appended trajectory must start right after this one",
                {"end": self.end_index, "other_start": other.start_index},
            )
        return Trajectory(np.vstack([self.values, other.values]), self.start_index)


@dataclass(frozen=True)
class HankelMatrix:
    """Block-Hankel matrix H_depth(x); block (r, c) equals x at index r + c"""
    entries: np.ndarray
    depth: int
    source_dim: int
    columns: int = field(init=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.shape[0] != self.depth * self.source_dim:
            raise DimensionError(
                "Hankel rows must equal depth * dim",
                {"rows": entries.shape[0], "depth": self.depth, "dim": self.source_dim},
            )
        object.__setattr__(self, "entries", _frozen(entries))
        object.__setattr__(self, "columns", entries.shape[1])

    @property
    def shape(self):
        return self.entries.shape

    def block(self, row: int, column: int) -> np.ndarray:
        rows = slice(row * self.source_dim, (row + 1) * self.source_dim)
        return self.entries[rows, column]
