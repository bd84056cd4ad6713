from typing import Any, Dict, Optional


class DdmpcError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes a command"""

    exit_code: int = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{key}={value}" for key, value in self.details.items())
        return f"{self.message} ({extra})"


class ConfigError(DdmpcError):
    exit_code = 1


class ArtifactError(DdmpcError):
    """Missing or malformed data / ingredient / candidate file"""
    exit_code = 1


class DimensionError(DdmpcError, ValueError):
    exit_code = 1


class WindowError(DdmpcError, ValueError):
    """History does not cover the requested lag window"""
    exit_code = 1


class ExcitationError(DdmpcError):
    exit_code = 2


class SynthesisInfeasibleError(DdmpcError):
    exit_code = 3


class TerminalDesignError(DdmpcError):
    exit_code = 3


class WeakCouplingError(DdmpcError):
    exit_code = 3


class SolverError(DdmpcError):
    exit_code = 3


class InconsistentInitializationError(DdmpcError):
    exit_code = 4


class MpcInfeasibleError(DdmpcError):
    exit_code = 4


class BootstrapError(DdmpcError):
    exit_code = 4


class VerificationFailed(DdmpcError):
    exit_code = 5


class OnlineSolverError(SolverError):
    """Numerical failure of a local MPC or bootstrap solve"""
    exit_code = 4
