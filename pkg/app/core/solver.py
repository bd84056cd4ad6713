from typing import Any, Dict, List, Optional

import cvxpy as cp

from app.core.config import settings
from app.core.errors import SolverError
import logging

logger = logging.getLogger(__name__)

SDP = "sdp"
QCQP = "qcqp"

# Cone support of the conic solvers cvxpy ships interfaces for
SOLVER_CAPABILITIES: Dict[str, set] = {
    "CLARABEL": {SDP, QCQP},
    "SCS": {SDP, QCQP},
    "MOSEK": {SDP, QCQP},
    "CVXOPT": {SDP, QCQP},
    "ECOS": {QCQP},
    "GUROBI": {QCQP},
}

ACCEPTED_STATUSES = (cp.OPTIMAL, cp.OPTIMAL_INACCURATE)
INFEASIBLE_STATUSES = (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE, cp.UNBOUNDED)


class SolverBackend:
    """cvxpy backend restricted to one capability (semidefinite or quadratic cones)"""

    def __init__(
        self,
        capability: str,
        preferred: Optional[str] = None,
        fallbacks: Optional[List[str]] = None,
        feas_tol: Optional[float] = None,
        max_iters: Optional[int] = None,
        verbose: Optional[bool] = None,
    ):
        if capability not in (SDP, QCQP):
            raise ValueError(f"Unknown solver capability '{capability}'")
        self.capability = capability
        default = settings.SDP_SOLVER if capability == SDP else settings.QP_SOLVER
        order = [preferred or default] + list(fallbacks if fallbacks is not None else settings.SOLVER_FALLBACKS)
        self.solver_order = [name.upper() for name in dict.fromkeys(order)]
        self.feas_tol = feas_tol
        self.max_iters = max_iters
        self.verbose = settings.SOLVER_VERBOSE if verbose is None else verbose

    def available_solvers(self) -> List[str]:
        """Configured solvers that are installed and have the required cones"""
        installed = set(cp.installed_solvers())
        return [
            name for name in self.solver_order
            if name in installed and self.capability in SOLVER_CAPABILITIES.get(name, set())
        ]

    def is_available(self) -> bool:
        return bool(self.available_solvers())

    def _solver_options(self, name: str) -> Dict[str, Any]:
        options: Dict[str, Any] = {}
        if name == "CLARABEL":
            if self.feas_tol is not None:
                options.update(tol_feas=self.feas_tol, tol_gap_abs=self.feas_tol, tol_gap_rel=self.feas_tol)
            if self.max_iters is not None:
                options["max_iter"] = self.max_iters
        elif name == "SCS":
            if self.feas_tol is not None:
                options.update(eps_abs=self.feas_tol, eps_rel=self.feas_tol)
            if self.max_iters is not None:
                options["max_iters"] = self.max_iters
        return options

    def solve(self, problem: cp.Problem) -> str:
        """
        Solve `problem` with the first configured solver that succeeds

        Returns:
            str: cvxpy status of the successful attempt (optimal, infeasible, ...)

        Raises:
            SolverError: if no solver is available or every attempt crashed
        """
        candidates = self.available_solvers()
        if not candidates:
            raise SolverError(
                f"No installed solver provides the '{self.capability}' capability",
                {"configured": self.solver_order},
            )

        last_error: Optional[Exception] = None
        for name in candidates:
            try:
                problem.solve(solver=name, verbose=self.verbose, **self._solver_options(name))
            except cp.error.SolverError as e:
                logger.warning(f"Solver {name} failed: {e}")
                last_error = e
                continue
            if problem.status in ACCEPTED_STATUSES or problem.status in INFEASIBLE_STATUSES:
                return problem.status
            logger.warning(f"Solver {name} returned status '{problem.status}', trying next")
            last_error = None

        raise SolverError(
            f"All solvers failed for the '{self.capability}' problem",
            {"tried": candidates, "status": problem.status, "error": str(last_error) if last_error else None},
        )
