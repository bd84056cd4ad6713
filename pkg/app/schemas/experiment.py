import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError


class ExplicitSubsystem(BaseModel):
    """x+ = A x + B u + sum_j coupling[k] y^neighbors[k],  y = C x + D u"""
    model_config = ConfigDict(extra="forbid")

    node: int
    A: List[List[float]]
    B: List[List[float]]
    C: List[List[float]]
    D: List[List[float]]
    neighbors: List[int] = Field(default_factory=list)
    coupling: List[List[List[float]]] = Field(default_factory=list, description="One B_ij per entry of neighbors")

    @model_validator(mode="after")
    def validate_coupling(self):
        if len(self.coupling) != len(self.neighbors):
            raise ValueError(f"Node {self.node} needs one coupling matrix per neighbor")
        return self


class NetworkSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    topology: Literal["chain", "explicit"] = "chain"
    M: int = Field(64, ge=1, description="Number of subsystems")
    mass: float = Field(1.0, gt=0)
    damping: float = Field(0.75, ge=0)
    coupling_gain: float = Field(1.25, ge=0, description="k_ij; zero decouples the chain")
    dt: float = Field(0.2, gt=0)
    subsystems: Optional[List[ExplicitSubsystem]] = None

    @model_validator(mode="after")
    def validate_topology(self):
        if self.topology == "explicit":
            if not self.subsystems:
                raise ValueError("Explicit topology needs a subsystems list")
            nodes = [sub.node for sub in self.subsystems]
            if len(set(nodes)) != len(nodes):
                raise ValueError("Explicit subsystems must have unique node ids")
            if len(nodes) != self.M:
                raise ValueError(f"M = {self.M} but {len(nodes)} subsystems are given")
        elif self.subsystems is not None:
            raise ValueError("subsystems is only allowed with the explicit topology")
        return self

    @property
    def nodes(self) -> List[int]:
        if self.topology == "explicit":
            return sorted(sub.node for sub in self.subsystems)
        return list(range(1, self.M + 1))


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(100, ge=1, description="Samples per node")
    seed: int = 0
    excitation: Tuple[float, float] = (-2.0, 2.0)
    initial_range: Union[float, List[float]] = 1.0

    @field_validator("excitation")
    @classmethod
    def validate_excitation(cls, v):
        if v[0] >= v[1]:
            raise ValueError("Excitation range must be increasing")
        return v


class MpcSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    L: int = Field(5, ge=2, description="Prediction horizon")
    n: int = Field(2, ge=1, description="Lag of the extended state")
    Q: List[List[float]] = Field(default_factory=lambda: [[1.0]])
    R: List[List[float]] = Field(default_factory=lambda: [[1.0]])
    omega: float = Field(0.01, ge=0, description="Consistency slack")
    epsilon: float = Field(1e-5, gt=0)
    theta: Optional[float] = Field(None, gt=0, lt=1, description="Override of the tightening factor")
    theta_floor: float = Field(0.5, gt=0, lt=1)
    coupling_bound: Optional[float] = Field(None, ge=0)
    u_lower: List[float] = Field(default_factory=lambda: [-2.0])
    u_upper: List[float] = Field(default_factory=lambda: [2.0])

    @model_validator(mode="after")
    def validate_mpc(self):
        if self.L <= self.n:
            raise ValueError(f"Horizon L = {self.L} must exceed the lag n = {self.n}")
        if len(self.u_lower) != len(self.u_upper):
            raise ValueError("u_lower and u_upper must have equal length")
        if any(low > high for low, high in zip(self.u_lower, self.u_upper)):
            raise ValueError("Input box must be nonempty")
        return self

    @property
    def u_box(self) -> Tuple[List[float], List[float]]:
        return self.u_lower, self.u_upper


class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: int = Field(10, ge=1, description="Closed-loop steps")
    seed: int = 1
    initial_range: Union[float, List[float]] = Field(default_factory=lambda: [0.7, 3.3])
    pre_input: float = 0.0
    bootstrap: Literal["centralized", "file"] = "centralized"
    candidates: Optional[str] = Field(None, description="Candidate file for the file bootstrap")
    plot_nodes: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    omegas: List[float] = Field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0])

    @field_validator("omegas")
    @classmethod
    def validate_omegas(cls, v):
        if any(omega < 0 for omega in v):
            raise ValueError("Consistency slacks must be nonnegative")
        return v


class SolverSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    qp_solver: Optional[str] = None
    sdp_solver: Optional[str] = None
    feas_tol: Optional[float] = Field(None, gt=0)
    max_iters: Optional[int] = Field(None, ge=1)
    sim_tol: float = Field(1e-6, gt=0)
    check_tol: float = Field(1e-6, gt=0)
    concurrency: Optional[int] = Field(None, ge=1)


class ExperimentConfig(BaseModel):
    """One experiment: plant, data collection, controller, closed-loop run and solvers"""
    model_config = ConfigDict(extra="forbid")

    network: NetworkSection = Field(default_factory=NetworkSection)
    data: DataSection = Field(default_factory=DataSection)
    mpc: MpcSection = Field(default_factory=MpcSection)
    run: RunSection = Field(default_factory=RunSection)
    solver: SolverSection = Field(default_factory=SolverSection)

    @model_validator(mode="after")
    def validate_plot_nodes(self):
        # plot nodes outside the network are dropped
        if set(self.run.plot_nodes) - set(self.network.nodes):
            self.run.plot_nodes = [i for i in self.run.plot_nodes if i in self.network.nodes]
        return self

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        """
        Raises:
            ConfigError: missing file, invalid JSON or a value/key the schema rejects
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError("Config file not found", {"path": str(path)})
        try:
            return cls.model_validate(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError("Config file is not valid JSON", {"path": str(path), "error": str(e)})
        except ValidationError as e:
            errors = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ConfigError(f"Invalid config: {errors}", {"path": str(path)})

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))
