from .signals import Trajectory, HankelMatrix
from .network import SubsystemModel, CouplingGraph, NetworkModel, DataSet, ExtendedState
from .behavior import BehavioralPredictor, SimulationData
from .terminal import ShiftStructure, SynthesisData, TerminalIngredients
from .agent import AgentConfig, NeighborTrajectory, ConsistencyReference, MpcSolution, ConstraintReport, Candidate
from .scheme import TrajectoryMessage, MessageBus, StepRecord, ClosedLoopLog

__all__ = [
    "Trajectory",
    "HankelMatrix",
    "SubsystemModel",
    "CouplingGraph",
    "NetworkModel",
    "DataSet",
    "ExtendedState",
    "BehavioralPredictor",
    "SimulationData",
    "ShiftStructure",
    "SynthesisData",
    "TerminalIngredients",
    "AgentConfig",
    "NeighborTrajectory",
    "ConsistencyReference",
    "MpcSolution",
    "ConstraintReport",
    "Candidate",
    "TrajectoryMessage",
    "MessageBus",
    "StepRecord",
    "ClosedLoopLog",
]
