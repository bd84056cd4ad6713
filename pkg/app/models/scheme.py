from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.errors import DdmpcError
from app.models.agent import MpcSolution, NeighborTrajectory
from app.models.network import CouplingGraph
from app.models.signals import Trajectory


@dataclass(frozen=True)
class TrajectoryMessage:
    """y*_[-n+1, L] of `sender`, computed at step `t`"""
    sender: int
    t: int
    values: Trajectory


class MessageBus:
    """
    In-process synchronous mailbox, one slot per directed edge (j, i)

    `send` fills the slots of every out-neighbor of the sender; `receive`
    requires a message of the current round from every neighbor and empties
    the receiver's slots.
    """

    def __init__(self, graph: CouplingGraph):
        self.graph = graph
        self._slots: Dict[Tuple[int, int], TrajectoryMessage] = {}
        self.sent: Counter = Counter()
        self.rounds: Counter = Counter()

    def send(self, message: TrajectoryMessage) -> None:
        for receiver in self.graph.out_neighbors(message.sender):
            edge = (message.sender, receiver)
            if edge in self._slots:
                raise DdmpcError("Mailbox already holds a message for this round", {"edge": edge, "t": message.t})
            self._slots[edge] = message
            self.sent[edge] += 1
            self.rounds[message.t] += 1

    def receive(self, receiver: int, t: int, L: int, n: int) -> NeighborTrajectory:
        """Stacked neighbor trajectory of round t (ascending neighbor order)"""
        neighbors = self.graph.neighbors(receiver)
        if not neighbors:
            return NeighborTrajectory.zeros(L, n, 0)
        messages = []
        for j in neighbors:
            message = self._slots.pop((j, receiver), None)
            if message is None or message.t != t:
                raise DdmpcError("Missing neighbor message", {"receiver": receiver, "sender": j, "t": t})
            messages.append(message.values)
        if len({(m.start_index, m.length) for m in messages}) != 1:
            raise DdmpcError("Neighbor messages cover different index ranges", {"receiver": receiver, "t": t})
        return NeighborTrajectory(Trajectory(np.hstack([m.values for m in messages]), messages[0].start_index))

    def pending(self) -> int:
        return len(self._slots)

    def messages_in_round(self, t: int) -> int:
        return self.rounds[t]


@dataclass
class StepRecord:
    t: int
    node: int
    u: np.ndarray
    y: np.ndarray
    x_true: np.ndarray
    cost_local: float
    status: str
    min_consistency_margin: float = float("nan")
    xi_deviation: float = float("nan")
    y_deviation: float = float("nan")
    prediction_error: float = float("nan")
    candidate_margin: float = float("nan")
    candidate_feasible: bool = True
    candidate_cost: float = float("nan")
    solution: Optional[MpcSolution] = field(default=None, repr=False)


@dataclass
class ClosedLoopLog:
    """One record per (t, node) plus per-step global quantities"""
    records: List[StepRecord] = field(default_factory=list)
    xi_norm: Dict[int, float] = field(default_factory=dict)
    V_global: Dict[int, float] = field(default_factory=dict)
    messages: Dict[int, int] = field(default_factory=dict)

    def add(self, record: StepRecord) -> None:
        self.records.append(record)

    @property
    def steps(self) -> List[int]:
        return sorted({record.t for record in self.records})

    @property
    def nodes(self) -> List[int]:
        return sorted({record.node for record in self.records})

    def at(self, t: int) -> List[StepRecord]:
        return sorted((r for r in self.records if r.t == t), key=lambda r: r.node)

    def for_node(self, node: int) -> List[StepRecord]:
        return sorted((r for r in self.records if r.node == node), key=lambda r: r.t)

    def state_history(self, node: int) -> np.ndarray:
        """(T, n) true states of one node"""
        return np.array([record.x_true for record in self.for_node(node)])
