"""
Sensitivity Matrix
Linearization of the measurement map around a reference conductivity
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .artifacts import content_hash, load_blob, read_json, save_blob, write_json
from .errors import DimensionMismatchError
from .fem_forward import FRAME_ORDERING, ForwardModel, MeasurementFrame, measurement_pairs
from .geometry import ElectrodeLayout, Mesh

logger = logging.getLogger(__name__)

DEFAULT_RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """Dense E(E-3) x n_elements Jacobian; rows follow the frame ordering, column m is element m"""

    entries: np.ndarray
    E: int
    amplitude: float = 1.0
    reference_hash: str = ""
    ordering: str = FRAME_ORDERING

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != self.E * (self.E - 3):
            raise DimensionMismatchError("sensitivity rows", self.E * (self.E - 3), entries.shape[0])
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self):
        return self.entries.shape

    @property
    def n_elements(self) -> int:
        return int(self.entries.shape[1])

    def apply(self, gamma_dot: np.ndarray) -> MeasurementFrame:
        return apply(self, gamma_dot)

    def columns(self, elements: np.ndarray) -> np.ndarray:
        return self.entries[:, np.asarray(elements, dtype=np.int64)]


def as_matrix(S: Union[SensitivityMatrix, np.ndarray]) -> np.ndarray:
    return S.entries if isinstance(S, SensitivityMatrix) else np.asarray(S, dtype=np.float64)


def assemble(
    mesh: Mesh,
    layout: ElectrodeLayout,
    gamma_t0: Optional[np.ndarray] = None,
    amplitude: float = 1.0,
    model: Optional[ForwardModel] = None,
) -> SensitivityMatrix:
    """Assemble the Jacobian of the frame with respect to element conductivities.

    Entry ((j, k), m) is -(1/I) * area_m * (grad u^j . grad u^k) on element m, with u^j the
    reference potential of drive j. P1 gradients are constant per element, so the element
    integral is exact. The sign makes the entries the derivative of the measured frame.

    Args:
        mesh: Domain mesh
        layout: Electrode layout
        gamma_t0: Reference conductivity (defaults to 1 everywhere)
        amplitude: Drive current I
        model: Optional prebuilt ForwardModel for this mesh/layout

    Returns:
        SensitivityMatrix tagged with a hash of the reference conductivity
    """
    gamma_t0 = np.ones(mesh.n_elements) if gamma_t0 is None else np.asarray(gamma_t0, dtype=np.float64)
    model = model or ForwardModel(mesh, layout)
    U, _ = model.solve_dofs(gamma_t0, amplitude)
    nodal = model.nodal(U)  # (E, n_nodes)

    # grad u^j on every element, shape (E, n_elements, 2)
    grads = np.einsum("jmi,mid->jmd", nodal[:, mesh.elements], mesh.basis_gradients)
    j, k = measurement_pairs(layout.E)
    dots = np.einsum("rmd,rmd->rm", grads[j], grads[k])
    entries = -(mesh.areas[None, :] / amplitude) * dots

    S = SensitivityMatrix(
        entries=entries, E=layout.E, amplitude=amplitude, reference_hash=content_hash(gamma_t0)
    )
    logger.info(f"Assembled sensitivity matrix {S.shape} (reference {S.reference_hash})")
    return S


def apply(S: Union[SensitivityMatrix, np.ndarray], gamma_dot: np.ndarray) -> MeasurementFrame:
    """Linearized frame S @ gamma_dot"""
    matrix = as_matrix(S)
    gamma_dot = np.asarray(gamma_dot, dtype=np.float64)
    if gamma_dot.shape != (matrix.shape[1],):
        raise DimensionMismatchError("element vector", matrix.shape[1], gamma_dot.size)
    E = S.E if isinstance(S, SensitivityMatrix) else _electrodes_for_rows(matrix.shape[0])
    amplitude = S.amplitude if isinstance(S, SensitivityMatrix) else 1.0
    return MeasurementFrame(values=matrix @ gamma_dot, E=E, amplitude=amplitude)


def _electrodes_for_rows(rows: int) -> int:
    E = int(round((3 + np.sqrt(9 + 4 * rows)) / 2))
    if E * (E - 3) != rows:
        raise DimensionMismatchError("sensitivity rows", E * (E - 3), rows)
    return E


def singular_values(S: Union[SensitivityMatrix, np.ndarray]) -> np.ndarray:
    return np.linalg.svd(as_matrix(S), compute_uv=False)


def numerical_rank(S: Union[SensitivityMatrix, np.ndarray], rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count of singular values above rel_tol * sigma_max"""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    sigma = singular_values(S)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > rel_tol * sigma[0]))


def kernel_dimension(
    S: Union[SensitivityMatrix, np.ndarray], d_pixels: Optional[int] = None, rel_tol: float = DEFAULT_RANK_TOL
) -> int:
    """Lower bound d - rank on the null-space dimension for an image of d unknowns"""
    d = as_matrix(S).shape[1] if d_pixels is None else int(d_pixels)
    return d - numerical_rank(S, rel_tol)


def sensitivity_map(S: Union[SensitivityMatrix, np.ndarray], mesh: Mesh) -> np.ndarray:
    """Column norm of S per element, divided by element area"""
    matrix = as_matrix(S)
    if matrix.shape[1] != mesh.n_elements:
        raise DimensionMismatchError("sensitivity columns", mesh.n_elements, matrix.shape[1])
    return np.linalg.norm(matrix, axis=0) / mesh.areas


def save_sensitivity(directory: Union[str, Path], S: SensitivityMatrix, name: str = "sensitivity") -> Path:
    directory = Path(directory)
    header = {
        "shape": list(S.shape),
        "E": S.E,
        "I": S.amplitude,
        "reference_hash": S.reference_hash,
        "ordering": S.ordering,
        "entries": save_blob(directory / f"{name}.f8", S.entries, "f8"),
    }
    return write_json(directory / f"{name}.json", header)


def load_sensitivity(directory: Union[str, Path], name: str = "sensitivity") -> SensitivityMatrix:
    directory = Path(directory)
    header = read_json(directory / f"{name}.json")
    return SensitivityMatrix(
        entries=load_blob(directory, header["entries"]),
        E=int(header["E"]),
        amplitude=float(header["I"]),
        reference_hash=header["reference_hash"],
        ordering=header["ordering"],
    )
