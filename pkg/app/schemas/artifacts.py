from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class ExtendedStateDims(BaseModel):
    n: int = Field(..., ge=1, description="Lag of the extended state")
    m: int = Field(..., ge=1)
    neighbor_dim: int = Field(..., ge=0, description="Stacked neighbor output dimension")
    p: int = Field(..., ge=1)

    @property
    def state_dim(self) -> int:
        return self.n * (self.m + self.neighbor_dim + self.p)


class TerminalIngredientsFile(BaseModel):
    """On-disk form of one node's terminal ingredients (matrices row-major)"""
    node: int
    dims: ExtendedStateDims
    P: List[List[float]]
    K: List[List[float]]
    epsilon: float = Field(..., gt=0)
    eta: float = Field(..., gt=0)
    eta_bar: float = Field(0.0, ge=0)
    theta: float = Field(..., gt=0, lt=1)
    report: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_shapes(self):
        size = self.dims.state_dim
        if len(self.P) != size or any(len(row) != size for row in self.P):
            raise ValueError(f"P must be {size} x {size}")
        if len(self.K) != self.dims.m or any(len(row) != size for row in self.K):
            raise ValueError(f"K must be {self.dims.m} x {size}")
        return self


class CandidateEntry(BaseModel):
    """Initial candidate of one node: inputs and outputs over [start_index, L - 1]"""
    node: int
    start_index: int
    u: List[List[float]]
    y: List[List[float]]

    @model_validator(mode="after")
    def validate_lengths(self):
        if not self.u or len(self.u) != len(self.y):
            raise ValueError("u and y must be non-empty and of equal length")
        return self


class CandidateFile(BaseModel):
    L: int = Field(..., ge=1)
    n: int = Field(..., ge=1)
    candidates: List[CandidateEntry]

    @field_validator("candidates")
    @classmethod
    def validate_unique_nodes(cls, v):
        nodes = [entry.node for entry in v]
        if len(set(nodes)) != len(nodes):
            raise ValueError("Duplicate node in candidate file")
        return v


class CheckResult(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[float] = None
    detail: Optional[str] = None


class VerificationReport(BaseModel):
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def success(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failed(self) -> List[CheckResult]:
        return [check for check in self.checks if not check.passed]

    def add(self, name: str, passed: bool, **kwargs) -> CheckResult:
        check = CheckResult(name=name, passed=bool(passed), **kwargs)
        self.checks.append(check)
        return check
