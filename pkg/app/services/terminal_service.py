import json
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
import scipy.linalg

from app.core.errors import ArtifactError, SynthesisInfeasibleError, TerminalDesignError, WeakCouplingError
from app.core.solver import INFEASIBLE_STATUSES, SDP, SolverBackend
from app.models.network import DataSet
from app.models.terminal import ShiftStructure, SynthesisData, TerminalIngredients
from app.schemas.artifacts import ExtendedStateDims, TerminalIngredientsFile
from app.services.signal_service import SignalService
import logging

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_THETA_FLOOR = 0.5
COUPLING_RATIOS = tuple(np.geomspace(1e-4, 1.0, 9))


def _slot_injector(n: int, dim: int) -> np.ndarray:
    """(n * dim) x dim matrix writing a sample into the last slot of a window"""
    injector = np.zeros((n * dim, dim))
    if dim:
        injector[(n - 1) * dim:, :] = np.eye(dim)
    return injector


class TerminalService:

    @staticmethod
    def build_shift_structure(n: int, m: int, neighbor_dim: int, p: int) -> ShiftStructure:
        shift = np.eye(n, k=1)
        A_bar = scipy.linalg.block_diag(np.kron(shift, np.eye(m)), np.kron(shift, np.eye(neighbor_dim)), np.kron(shift, np.eye(p)))
        size = n * (m + neighbor_dim + p)
        u_rows, yn_rows = n * m, n * neighbor_dim

        B_u = np.zeros((size, m))
        B_u[:u_rows] = _slot_injector(n, m)
        B_yn = np.zeros((size, neighbor_dim))
        B_yn[u_rows:u_rows + yn_rows] = _slot_injector(n, neighbor_dim)
        B_w = np.zeros((size, p))
        B_w[u_rows + yn_rows:] = _slot_injector(n, p)
        return ShiftStructure(A_bar, B_u, B_yn, B_w, n, m, neighbor_dim, p)

    @staticmethod
    def build_synthesis_data(data: DataSet, n: int, shift: Optional[ShiftStructure] = None) -> SynthesisData:
        """
        Assemble Xi, Xi+, U, Y_n, Z = [Xi; U] and M = Xi+ - A_bar Xi - B_u U - B_yn Y_n

        Column t - n holds xi_t for t = n, ..., N - 1, so N - n columns.

        Raises:
            TerminalDesignError: if N < n + 2
        """
        if data.N < n + 2:
            raise TerminalDesignError("Data too short for synthesis", {"N": data.N, "n": n})
        shift = shift or TerminalService.build_shift_structure(n, data.m, data.neighbor_dim, data.p)
        # column c of H_n(.) is the window [c, c + n - 1], i.e. the part of xi_{c + n}
        windows = np.vstack([
            SignalService.build_hankel(data.u_d, n).entries,
            SignalService.build_hankel(data.y_neighbors_d, n).entries,
            SignalService.build_hankel(data.y_d, n).entries,
        ])
        Xi, Xi_plus = windows[:, :-1], windows[:, 1:]
        U = data.u_d.values[n:].T
        Y_n = data.y_neighbors_d.values[n:].T
        Z = np.vstack([Xi, U])
        M_res = Xi_plus - shift.A_bar @ Xi - shift.B_u @ U - shift.B_yn @ Y_n
        return SynthesisData(Xi=Xi, Xi_plus=Xi_plus, U=U, Y_n=Y_n, Z=Z, M_res=M_res)

    @staticmethod
    def build_uncertainty_multiplier(s: SynthesisData, shift: ShiftStructure) -> np.ndarray:
        """
        Quadratic-form multiplier of all Delta with Delta Z = B_w^T M

        Returns T^T C T with C = [[-Z Z^T, Z M^T B_w], [B_w^T M Z^T, -B_w^T M M^T B_w]]
        and T = [[0, I], [B_w^T, 0]]; it is zero on [B_w; Delta^T] for every
        consistent Delta.
        """
        Z, B_w = s.Z, shift.B_w
        W = B_w.T @ s.M_res
        core = np.block([
            [-Z @ Z.T, Z @ W.T],
            [W @ Z.T, -W @ W.T],
        ])
        nz = Z.shape[0]
        outer = np.block([
            [np.zeros((nz, shift.state_dim)), np.eye(nz)],
            [B_w.T, np.zeros((shift.p, nz))],
        ])
        multiplier = outer.T @ core @ outer
        return (multiplier + multiplier.T) / 2

    @staticmethod
    def synthesize(
        s: SynthesisData,
        shift: ShiftStructure,
        Q: np.ndarray,
        R: np.ndarray,
        backend: Optional[SolverBackend] = None,
        margin: float = 1e-6,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Data-driven terminal cost and controller from the robust LMI

        Decision variables X > 0, Gamma > 0, M, tau >= 0; minimizes trace(Gamma)
        subject to [[Gamma, I], [I, X]] > 0 and the block LMI built from the
        uncertainty multiplier. Strict inequalities are imposed with `margin`.

        Returns:
            (P, K) with P = X^-1 - T_y^T Q T_y and K = M X^-1

        Raises:
            SynthesisInfeasibleError: if the LMI is infeasible or P is not positive definite
            SolverError: if the semidefinite backend fails
        """
        backend = backend or SolverBackend(SDP)
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        size, m, p = shift.state_dim, shift.m, shift.p
        nz = size + m

        multiplier = TerminalService.build_uncertainty_multiplier(s, shift)
        Q_r = scipy.linalg.cholesky(Q) @ shift.T_y
        R_r = scipy.linalg.cholesky(R)

        X = cp.Variable((size, size), symmetric=True)
        Gamma = cp.Variable((size, size), symmetric=True)
        M = cp.Variable((m, size))
        tau = cp.Variable(nonneg=True)

        lifted = cp.vstack([shift.A_bar @ X + shift.B_u @ M, X, M])
        performance = cp.vstack([Q_r @ X, R_r @ M])
        padded_X = cp.bmat([
            [X, np.zeros((size, nz))],
            [np.zeros((nz, size)), np.zeros((nz, nz))],
        ])
        block = cp.bmat([
            [tau * multiplier - padded_X, lifted, np.zeros((size + nz, p + m))],
            [lifted.T, -X, performance.T],
            [np.zeros((p + m, size + nz)), performance, -np.eye(p + m)],
        ])
        block = (block + block.T) / 2
        schur = cp.bmat([[Gamma, np.eye(size)], [np.eye(size), X]])
        schur = (schur + schur.T) / 2

        constraints = [
            X >> margin * np.eye(size),
            Gamma >> margin * np.eye(size),
            schur >> margin * np.eye(2 * size),
            block << -margin * np.eye(block.shape[0]),
        ]
        problem = cp.Problem(cp.Minimize(cp.trace(Gamma)), constraints)
        status = backend.solve(problem)
        if status in INFEASIBLE_STATUSES or X.value is None:
            raise SynthesisInfeasibleError("Terminal-ingredient LMI is infeasible", {"status": status})

        X_value = (X.value + X.value.T) / 2
        P = np.linalg.inv(X_value) - shift.T_y.T @ Q @ shift.T_y
        P = (P + P.T) / 2
        K = scipy.linalg.solve(X_value, M.value.T, assume_a="sym").T
        lambda_min = float(np.linalg.eigvalsh(P)[0])
        if lambda_min <= 0:
            raise SynthesisInfeasibleError("Synthesized P is not positive definite", {"lambda_min": lambda_min})
        logger.info(f"Synthesized terminal ingredients: status {status}, tau {float(tau.value):.3g}, "
                    f"gamma^2 {float(np.trace(Gamma.value)):.3g}, lambda_min(P) {lambda_min:.3g}")
        return P, K

    @staticmethod
    def closed_loop_from_data(s: SynthesisData, shift: ShiftStructure, K: np.ndarray) -> np.ndarray:
        """
        Model-free closed-loop matrix (Xi+ - B_yn Y_n) Z^+ [I; K]

        Exact for noise-free data whenever Z has full row rank.
        """
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if SignalService.numerical_rank(s.Z) < s.Z.shape[0]:
            logger.warning("Z is rank deficient; the data-driven closed loop is not unique")
        open_loop = (s.Xi_plus - shift.B_yn @ s.Y_n) @ scipy.linalg.pinv(s.Z)
        return open_loop @ np.vstack([np.eye(shift.state_dim), K])

    @staticmethod
    def decrease_matrix(
        A_cl: np.ndarray,
        P: np.ndarray,
        K: np.ndarray,
        Q: np.ndarray,
        R: np.ndarray,
        shift: ShiftStructure,
    ) -> np.ndarray:
        """xi^T D xi = ||xi+||_P^2 - ||xi||_P^2 + ||y||_Q^2 + ||K xi||_R^2 along the decoupled closed loop"""
        output_map = shift.T_y @ A_cl
        D = A_cl.T @ P @ A_cl - P + output_map.T @ Q @ output_map + K.T @ R @ K
        return (D + D.T) / 2

    @staticmethod
    def decrease_margin(D: np.ndarray, P: np.ndarray) -> float:
        """Largest eta_bar with D + eta_bar P <= 0 (smallest generalized eigenvalue of (-D, P))"""
        return float(scipy.linalg.eigh(-D, P, eigvals_only=True)[0])

    @staticmethod
    def input_support(P: np.ndarray, K: np.ndarray, epsilon: float) -> np.ndarray:
        """max of |K_j xi| over the ellipsoid ||xi||_P^2 <= epsilon, per input channel"""
        P_inv_Kt = scipy.linalg.solve(P, K.T, assume_a="pos")
        return np.sqrt(epsilon * np.einsum("ij,ji->i", K, P_inv_Kt))

    @staticmethod
    def coupled_decrease_holds(
        A_cl: np.ndarray,
        P: np.ndarray,
        K: np.ndarray,
        Q: np.ndarray,
        R: np.ndarray,
        shift: ShiftStructure,
        eta: float,
        epsilon: float,
        ratio: float,
        samples: int = 200,
        rng: Optional[np.random.Generator] = None,
        tol: float = 1e-12,
    ) -> bool:
        """
        Sample the terminal decrease with neighbor outputs acting on the window

        xi is drawn on the boundary of the epsilon-ellipsoid and y^-i_t with norm
        ratio * ||xi|| in a random direction.
        """
        rng = rng or np.random.default_rng(0)
        size = shift.state_dim
        chol = scipy.linalg.cholesky(P, lower=True)
        for _ in range(samples):
            direction = rng.standard_normal(size)
            xi = np.sqrt(epsilon) * scipy.linalg.solve_triangular(chol.T, direction / np.linalg.norm(direction))
            y_neighbors = np.zeros(shift.neighbor_dim)
            if shift.neighbor_dim:
                neighbor_dir = rng.standard_normal(shift.neighbor_dim)
                y_neighbors = ratio * np.linalg.norm(xi) * neighbor_dir / np.linalg.norm(neighbor_dir)
            xi_next = A_cl @ xi + shift.B_yn @ y_neighbors
            y = shift.T_y @ xi_next
            u = K @ xi
            lhs = xi_next @ P @ xi_next - xi @ P @ xi
            rhs = -eta * xi @ xi - y @ Q @ y - u @ R @ u
            if lhs > rhs + tol * max(1.0, abs(rhs)):
                return False
        return True

    @staticmethod
    def calibrate(
        P: np.ndarray,
        K: np.ndarray,
        s: SynthesisData,
        shift: ShiftStructure,
        Q: np.ndarray,
        R: np.ndarray,
        u_box: Tuple[Sequence[float], Sequence[float]],
        epsilon: float = DEFAULT_EPSILON,
        theta: Optional[float] = None,
        theta_floor: float = DEFAULT_THETA_FLOOR,
        coupling_bound: Optional[float] = None,
        max_shrink: int = 30,
        samples: int = 200,
        seed: int = 0,
    ) -> TerminalIngredients:
        """
        Turn a synthesized (P, K) into terminal ingredients

        eta_bar comes from the data-driven closed loop, eta = eta_bar lambda_min(P),
        theta = max(1 - eta / lambda_max(P), theta_floor) unless given. Epsilon is
        halved until K xi stays inside the input box over the epsilon-ellipsoid.
        The coupled decrease is sampled on a geometric grid of neighbor-output
        ratios and the largest passing ratio is reported.

        Raises:
            TerminalDesignError: no certified decrease, input box unreachable or theta too small
            WeakCouplingError: `coupling_bound` is given and the decrease fails there
        """
        P = (np.asarray(P, dtype=float) + np.asarray(P, dtype=float).T) / 2
        K = np.atleast_2d(np.asarray(K, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        eigenvalues = np.linalg.eigvalsh(P)
        lambda_min, lambda_max = float(eigenvalues[0]), float(eigenvalues[-1])

        A_cl = TerminalService.closed_loop_from_data(s, shift, K)
        D = TerminalService.decrease_matrix(A_cl, P, K, Q, R, shift)
        eta_bar = TerminalService.decrease_margin(D, P)
        if eta_bar <= 0:
            raise TerminalDesignError("Terminal cost does not decrease along the data-driven closed loop", {"eta_bar": eta_bar})
        eta = eta_bar * lambda_min
        lower_bound = 1.0 - eta / lambda_max
        if theta is None:
            theta = max(lower_bound, theta_floor)
        elif theta < lower_bound:
            raise TerminalDesignError("theta below 1 - eta / lambda_max(P)", {"theta": theta, "bound": lower_bound})

        lower, upper = (np.asarray(bound, dtype=float).reshape(-1) for bound in u_box)
        reach = np.minimum(upper, -lower)
        if np.any(reach <= 0):
            raise TerminalDesignError("Input box must contain the origin in its interior", {"lower": lower.tolist(), "upper": upper.tolist()})
        shrinks = 0
        while np.any(TerminalService.input_support(P, K, epsilon) > reach):
            if shrinks >= max_shrink:
                raise TerminalDesignError("Terminal controller violates the input box for every tried epsilon", {"epsilon": epsilon})
            epsilon /= 2
            shrinks += 1
            logger.warning(f"Terminal controller leaves the input box, shrinking epsilon to {epsilon:.3g}")

        rng = np.random.default_rng(seed)
        max_ratio = 0.0
        for ratio in (0.0,) + COUPLING_RATIOS:
            if not TerminalService.coupled_decrease_holds(A_cl, P, K, Q, R, shift, eta, epsilon, ratio, samples, rng):
                break
            max_ratio = ratio
        if coupling_bound is not None and coupling_bound > 0 and not TerminalService.coupled_decrease_holds(
            A_cl, P, K, Q, R, shift, eta, epsilon, coupling_bound, samples, rng
        ):
            raise WeakCouplingError(
                "Terminal decrease fails for the configured neighbor-output bound",
                {"coupling_bound": coupling_bound, "max_passing_ratio": max_ratio},
            )

        report = {
            "lambda_min": lambda_min,
            "lambda_max": lambda_max,
            "theta_lower_bound": lower_bound,
            "max_coupling_ratio": max_ratio,
            "epsilon_shrinks": shrinks,
        }
        logger.info(f"Calibrated terminal ingredients: epsilon {epsilon:.3g}, eta {eta:.3g}, theta {theta:.3g}, "
                    f"max coupling ratio {max_ratio:.3g}")
        return TerminalIngredients(P=P, K=K, epsilon=epsilon, eta=eta, theta=theta, eta_bar=eta_bar, report=report)

    @staticmethod
    def design(
        data: DataSet,
        n: int,
        Q: np.ndarray,
        R: np.ndarray,
        u_box: Tuple[Sequence[float], Sequence[float]],
        backend: Optional[SolverBackend] = None,
        **calibration: Any,
    ) -> TerminalIngredients:
        """Shift structure, data matrices, LMI and calibration for one node"""
        shift = TerminalService.build_shift_structure(n, data.m, data.neighbor_dim, data.p)
        s = TerminalService.build_synthesis_data(data, n, shift)
        try:
            P, K = TerminalService.synthesize(s, shift, Q, R, backend)
        except SynthesisInfeasibleError as e:
            e.details.setdefault("node", data.node)
            raise
        ingredients = TerminalService.calibrate(P, K, s, shift, Q, R, u_box, **calibration)
        ingredients.report["node"] = data.node
        return ingredients

    @staticmethod
    def save_ingredients(
        ingredients: TerminalIngredients,
        dims: Tuple[int, int, int, int],
        node: int,
        path: Union[str, Path],
    ) -> None:
        n, m, neighbor_dim, p = dims
        payload = TerminalIngredientsFile(
            node=node,
            dims=ExtendedStateDims(n=n, m=m, neighbor_dim=neighbor_dim, p=p),
            P=ingredients.P.tolist(),
            K=ingredients.K.tolist(),
            epsilon=ingredients.epsilon,
            eta=ingredients.eta,
            eta_bar=ingredients.eta_bar,
            theta=ingredients.theta,
            report={key: value for key, value in ingredients.report.items() if key != "node"},
        )
        Path(path).write_text(payload.model_dump_json(indent=2))

    @staticmethod
    def load_ingredients(path: Union[str, Path]) -> Tuple[TerminalIngredientsFile, TerminalIngredients]:
        """
        Raises:
            ArtifactError: if the file is missing or malformed
        """
        path = Path(path)
        if not path.exists():
            raise ArtifactError("Terminal-ingredient file not found", {"path": str(path)})
        try:
            payload = TerminalIngredientsFile.model_validate(json.loads(path.read_text()))
        except (ValueError, json.JSONDecodeError) as e:
            raise ArtifactError("Malformed terminal-ingredient file", {"path": str(path), "error": str(e)})
        ingredients = TerminalIngredients(
            P=np.array(payload.P),
            K=np.array(payload.K),
            epsilon=payload.epsilon,
            eta=payload.eta,
            theta=payload.theta,
            eta_bar=payload.eta_bar,
            report=dict(payload.report),
        )
        return payload, ingredients
