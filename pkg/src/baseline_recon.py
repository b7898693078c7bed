"""
Baseline Reconstructions
Tikhonov and total-variation regularized least squares in the element basis
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.optimize import brentq
from scipy.sparse import csr_matrix, diags

from .errors import DimensionMismatchError
from .fem_forward import MeasurementFrame
from .geometry import Mesh
from .sensitivity import SensitivityMatrix, as_matrix

logger = logging.getLogger(__name__)

Frame = Union[MeasurementFrame, np.ndarray]


@dataclass(frozen=True)
class TikhonovConfig:
    """Quadratic penalty weight; None selects it by the discrepancy principle"""

    lam: Optional[float] = None
    noise_level: float = 0.05

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ValueError(f"Tikhonov lambda must be positive, got {self.lam}")


@dataclass(frozen=True)
class TVConfig:
    lam: Optional[float] = None
    epsilon: float = 1e-4
    max_iters: int = 50
    conv_tol: float = 1e-6
    noise_level: float = 0.05

    def __post_init__(self):
        if self.lam is not None and self.lam <= 0:
            raise ValueError(f"TV lambda must be positive, got {self.lam}")
        if self.epsilon <= 0 or self.max_iters <= 0 or self.conv_tol <= 0:
            raise ValueError("TV epsilon, max_iters and conv_tol must be positive")


@dataclass
class TVResult:
    """Lagged-diffusivity output: best iterate, objective per iterate, convergence flag"""

    gamma_dot: np.ndarray
    lam: float
    objective_history: List[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def _frame_values(frame: Frame, rows: int) -> np.ndarray:
    values = frame.values if isinstance(frame, MeasurementFrame) else np.asarray(frame, dtype=np.float64)
    if values.shape != (rows,):
        raise DimensionMismatchError("measurement frame", rows, values.size)
    return values


def discrete_gradient(mesh: Mesh) -> csr_matrix:
    """One row per interior element edge (a, b): gamma_a - gamma_b"""
    pairs = mesh.element_adjacency
    n = len(pairs)
    rows = np.repeat(np.arange(n), 2)
    cols = pairs.ravel()
    values = np.tile([1.0, -1.0], n)
    return csr_matrix((values, (rows, cols)), shape=(n, mesh.n_elements))


def discrepancy_target(values: np.ndarray, noise_level: float) -> float:
    """Expected noise norm when each component carries noise of std noise_level * RMS"""
    return float(noise_level * np.linalg.norm(values))


class TikhonovSolver:
    """Tikhonov solutions for many frames and lambdas from one SVD of S"""

    def __init__(self, S: Union[SensitivityMatrix, np.ndarray]):
        self.matrix = as_matrix(S)

    @cached_property
    def _svd(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        U, sigma, Vt = np.linalg.svd(self.matrix, full_matrices=False)
        return U, sigma, Vt

    def solve(self, frame: Frame, lam: float) -> np.ndarray:
        """Solution of (S^T S + lam I) x = S^T b"""
        if lam <= 0:
            raise ValueError(f"Tikhonov lambda must be positive, got {lam}")
        b = _frame_values(frame, self.matrix.shape[0])
        U, sigma, Vt = self._svd
        return Vt.T @ ((sigma / (sigma**2 + lam)) * (U.T @ b))

    def residual_norm(self, frame: Frame, lam: float) -> float:
        b = _frame_values(frame, self.matrix.shape[0])
        U, sigma, _ = self._svd
        coeffs = U.T @ b
        outside = max(float(b @ b - coeffs @ coeffs), 0.0)
        inside = np.sum((lam / (sigma**2 + lam) * coeffs) ** 2)
        return math.sqrt(outside + inside)

    def discrepancy_lambda(self, frame: Frame, target: float) -> float:
        """Lambda whose data residual equals target (clamped to the search range)"""
        _, sigma, _ = self._svd
        top = float(sigma[0]) ** 2 if sigma.size and sigma[0] > 0 else 1.0
        lo, hi = math.log(top * 1e-14), math.log(top * 1e4)

        def gap(log_lam: float) -> float:
            return self.residual_norm(frame, math.exp(log_lam)) - target

        if gap(lo) >= 0:
            logger.warning("Discrepancy target below the smallest attainable residual; using minimum lambda")
            return math.exp(lo)
        if gap(hi) <= 0:
            logger.warning("Discrepancy target above the data norm; using maximum lambda")
            return math.exp(hi)
        return math.exp(brentq(gap, lo, hi, xtol=1e-6))


def tikhonov(
    S: Union[SensitivityMatrix, np.ndarray], frame: Frame, cfg: TikhonovConfig = TikhonovConfig()
) -> np.ndarray:
    """argmin ||V - S x||^2 + lam ||x||^2"""
    solver = TikhonovSolver(S)
    lam = cfg.lam
    if lam is None:
        b = _frame_values(frame, solver.matrix.shape[0])
        lam = solver.discrepancy_lambda(b, discrepancy_target(b, cfg.noise_level))
        logger.debug(f"Tikhonov discrepancy lambda {lam:.3e}")
    return solver.solve(frame, lam)


def tv_objective(
    S: np.ndarray, D: csr_matrix, b: np.ndarray, x: np.ndarray, lam: float, epsilon: float
) -> float:
    r = b - S @ x
    return float(r @ r + lam * np.sum(np.sqrt((D @ x) ** 2 + epsilon**2)))


def tv_iterations(
    S: np.ndarray, D: csr_matrix, b: np.ndarray, lam: float, cfg: TVConfig, max_iters: int
) -> TVResult:
    # Majorize-minimize: each step solves (2 S^T S + lam D^T W D) x = 2 S^T b with W = 1/sqrt((Dx)^2 + eps^2)
    StS = 2.0 * (S.T @ S)
    rhs = 2.0 * (S.T @ b)
    x = np.zeros(S.shape[1])
    history = [tv_objective(S, D, b, x, lam, cfg.epsilon)]
    best_x, best_j = x, history[0]
    converged = False
    iterations = 0

    for iterations in range(1, max_iters + 1):
        w = 1.0 / np.sqrt((D @ x) ** 2 + cfg.epsilon**2)
        A = StS + lam * (D.T @ diags(w) @ D).toarray()
        x_new = scipy.linalg.solve(A, rhs, assume_a="sym")
        j_new = tv_objective(S, D, b, x_new, lam, cfg.epsilon)
        history.append(j_new)
        if j_new <= best_j:
            best_x, best_j = x_new, j_new

        step = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), np.finfo(float).tiny)
        x = x_new
        if step < cfg.conv_tol:
            converged = True
            break

    return TVResult(gamma_dot=best_x, lam=lam, objective_history=history, converged=converged, iterations=iterations)


def tv_discrepancy_lambda(
    S: np.ndarray, D: csr_matrix, b: np.ndarray, target: float, cfg: TVConfig, steps: int = 12, search_iters: int = 15
) -> float:
    """Geometric bisection on lambda with shortened TV runs"""
    scale = float(np.linalg.norm(S, 2)) ** 2
    lo, hi = math.log(scale * 1e-10), math.log(scale * 1e2)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        result = tv_iterations(S, D, b, math.exp(mid), cfg, search_iters)
        if np.linalg.norm(b - S @ result.gamma_dot) > target:
            hi = mid
        else:
            lo = mid
    return math.exp(0.5 * (lo + hi))


def total_variation(
    S: Union[SensitivityMatrix, np.ndarray], frame: Frame, mesh: Mesh, cfg: TVConfig = TVConfig()
) -> TVResult:
    """Lagged-diffusivity minimization of ||V - S x||^2 + lam * sum sqrt(|Dx|^2 + eps^2).

    The objective is non-increasing across iterations. When max_iters is reached without
    meeting conv_tol, the best iterate is returned with converged=False.
    """
    matrix = as_matrix(S)
    b = _frame_values(frame, matrix.shape[0])
    D = discrete_gradient(mesh)
    if D.shape[1] != matrix.shape[1]:
        raise DimensionMismatchError("sensitivity columns", D.shape[1], matrix.shape[1])

    lam = cfg.lam
    if lam is None:
        lam = tv_discrepancy_lambda(matrix, D, b, discrepancy_target(b, cfg.noise_level), cfg)
        logger.debug(f"TV discrepancy lambda {lam:.3e}")

    result = tv_iterations(matrix, D, b, lam, cfg, cfg.max_iters)
    if not result.converged:
        logger.warning(f"TV did not converge in {cfg.max_iters} iterations; returning best iterate")
    return result
