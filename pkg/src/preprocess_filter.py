"""
Boundary Error Filter
Removes the part of the difference data explained by boundary-adjacent elements
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import DimensionMismatchError, FilterError
from .fem_forward import MeasurementFrame
from .geometry import Mesh
from .sensitivity import SensitivityMatrix, as_matrix

logger = logging.getLogger(__name__)

DEFAULT_FILTER_SCALE = 1e-3


@dataclass(frozen=True, eq=False)
class BoundaryFilter:
    """Cached operator M = S_b (S_b^T S_b + lambda_f I)^-1 S_b^T over the boundary-adjacent columns"""

    boundary_elements: np.ndarray
    lambda_f: float
    operator: np.ndarray
    scale: Optional[float] = None

    @property
    def size(self) -> int:
        return int(self.operator.shape[0])

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Filter raw frame values; accepts one frame or a (n, rows) batch"""
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != self.size:
            raise DimensionMismatchError("measurement frame", self.size, values.shape[-1])
        return values - values @ self.operator.T

    def manifest(self) -> Dict[str, Any]:
        return {
            "lambda_f": self.lambda_f,
            "scale": self.scale,
            "n_boundary_elements": int(self.boundary_elements.size),
            "adjacency_rule": "element has a boundary node",
        }


def default_lambda(S: Union[SensitivityMatrix, np.ndarray], mesh: Mesh, scale: float = DEFAULT_FILTER_SCALE) -> float:
    """scale * trace(S_b^T S_b) / cols, i.e. scale times the mean squared boundary column norm"""
    S_b = as_matrix(S)[:, mesh.boundary_adjacent_elements]
    return float(scale * np.sum(S_b**2) / S_b.shape[1])


def build_filter(
    S: Union[SensitivityMatrix, np.ndarray],
    mesh: Mesh,
    lambda_f: Optional[float] = None,
    scale: float = DEFAULT_FILTER_SCALE,
    allow_projection: bool = False,
) -> BoundaryFilter:
    """Build the boundary filter.

    Args:
        S: Sensitivity matrix
        mesh: Mesh the columns of S refer to
        lambda_f: Regularization; defaults to default_lambda(S, mesh, scale)
        scale: Relative scale used when lambda_f is None
        allow_projection: Accept lambda_f = 0, giving the orthogonal projection onto range(S_b)

    Returns:
        Immutable BoundaryFilter
    """
    matrix = as_matrix(S)
    if matrix.shape[1] != mesh.n_elements:
        raise DimensionMismatchError("sensitivity columns", mesh.n_elements, matrix.shape[1])
    if lambda_f is None:
        lambda_f = default_lambda(matrix, mesh, scale)
    else:
        scale = None
    if lambda_f < 0 or (lambda_f == 0 and not allow_projection):
        raise FilterError(f"lambda_f must be positive, got {lambda_f}")

    boundary = mesh.boundary_adjacent_elements
    U, sigma, _ = np.linalg.svd(matrix[:, boundary], full_matrices=False)
    if lambda_f > 0:
        weights = sigma**2 / (sigma**2 + lambda_f)
    else:
        weights = (sigma > sigma[0] * max(matrix.shape) * np.finfo(float).eps).astype(float)
    M = (U * weights) @ U.T
    M = 0.5 * (M + M.T)
    M.setflags(write=False)

    logger.info(
        f"Built boundary filter over {boundary.size} elements, lambda_f={lambda_f:.3e}, "
        f"largest gain {weights.max(initial=0.0):.4f}"
    )
    return BoundaryFilter(boundary_elements=boundary, lambda_f=float(lambda_f), operator=M, scale=scale)


def filter_frame(frame: MeasurementFrame, boundary_filter: BoundaryFilter) -> MeasurementFrame:
    """Filtered data V - M V"""
    if len(frame) != boundary_filter.size:
        raise DimensionMismatchError("measurement frame", boundary_filter.size, len(frame))
    return frame.with_values(boundary_filter.apply(frame.values))
