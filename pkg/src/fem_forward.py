"""
Shunt-Model Forward Solver
P1 finite elements with equipotential electrodes, adjacent-pair drives and the
E(E-3) adjacent-pair measurement frame
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu

from .artifacts import load_blob, read_json, save_blob, write_json
from .config import settings
from .errors import DimensionMismatchError, ForwardSolveError
from .geometry import ElectrodeLayout, Mesh

logger = logging.getLogger(__name__)

FRAME_ORDERING = "adjacent-drive, skip-driving, drive-major"


def measurement_pairs(E: int) -> Tuple[np.ndarray, np.ndarray]:
    """Drive and measurement pair indices (0-based) in frame order.

    Drive j runs current from electrode j to j+1; measurement k reads electrode k minus k+1.
    For each j, k runs j+2, ..., j+E-2 (mod E), skipping every pair that touches a driven electrode.
    """
    j = np.repeat(np.arange(E), E - 3)
    k = (j + np.tile(np.arange(2, E - 1), E)) % E
    return j, k


@dataclass(frozen=True)
class DrivePattern:
    """Current +amplitude into electrode j, -amplitude out of electrode j+1 (0-based, cyclic)"""

    j: int
    amplitude: float = 1.0


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    """E(E-3) adjacent-pair voltage differences in frame order"""

    values: np.ndarray
    E: int
    amplitude: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.E * (self.E - 3),):
            raise DimensionMismatchError("measurement frame", self.E * (self.E - 3), values.size)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def pair_matrix(self) -> np.ndarray:
        """E x E matrix V[j, k]; unmeasured pairs are NaN"""
        V = np.full((self.E, self.E), np.nan)
        j, k = measurement_pairs(self.E)
        V[j, k] = self.values
        return V

    def with_values(self, values: np.ndarray) -> "MeasurementFrame":
        return MeasurementFrame(values=values, E=self.E, amplitude=self.amplitude)


@dataclass(frozen=True, eq=False)
class NodalPotential:
    """Potential of one drive: nodal values plus the common value on each electrode"""

    nodal: np.ndarray
    electrode_potentials: np.ndarray
    drive: DrivePattern
    residual: float


def _check_conductivity(gamma: np.ndarray, mesh: Mesh) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (mesh.n_elements,):
        raise DimensionMismatchError("conductivity", mesh.n_elements, gamma.size)
    if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
        raise ForwardSolveError("conductivity must be finite and strictly positive")
    return gamma


class ForwardModel:
    """Degree-of-freedom layout and element stiffness templates for one mesh/electrode layout.

    All nodes under an electrode share one degree of freedom, which makes each electrode
    equipotential and its net current a single row of the assembled system.
    """

    def __init__(self, mesh: Mesh, layout: ElectrodeLayout, tol: Optional[float] = None):
        self.mesh = mesh
        self.layout = layout
        # Relative residual bound per drive; defaults to settings.solver_tol
        self.tol = settings.solver_tol if tol is None else tol

        electrode_nodes = layout.electrode_nodes(mesh)
        on_electrode = np.full(mesh.n_nodes, -1, dtype=np.int64)
        for i, nodes in enumerate(electrode_nodes):
            if np.any(on_electrode[nodes] >= 0):
                raise ForwardSolveError(f"electrode {i} shares nodes with another electrode")
            on_electrode[nodes] = i

        free = np.flatnonzero(on_electrode < 0)
        dof = np.empty(mesh.n_nodes, dtype=np.int64)
        dof[free] = np.arange(free.size)
        dof[on_electrode >= 0] = free.size + on_electrode[on_electrode >= 0]
        self.dof_of_node = dof
        self.n_dofs = free.size + layout.E
        self.electrode_dofs = free.size + np.arange(layout.E)

        # Pin an interior dof (the node nearest the centre); grounding is restored by a shift afterwards
        interior = np.setdiff1d(free, mesh.boundary_nodes)
        candidates = interior if interior.size else free
        self.pinned_dof = int(dof[candidates[np.argmin(np.linalg.norm(mesh.nodes[candidates], axis=1))]])
        self.kept_dofs = np.setdiff1d(np.arange(self.n_dofs), [self.pinned_dof])

    @cached_property
    def _local_stiffness(self) -> np.ndarray:
        # area * G G^T per element for unit conductivity, shape (n_elements, 3, 3)
        G = self.mesh.basis_gradients
        return self.mesh.areas[:, None, None] * np.einsum("mid,mjd->mij", G, G)

    @cached_property
    def _assembly_index(self) -> Tuple[np.ndarray, np.ndarray]:
        elem_dofs = self.dof_of_node[self.mesh.elements]
        rows = np.repeat(elem_dofs, 3, axis=1).ravel()
        cols = np.tile(elem_dofs, (1, 3)).ravel()
        return rows, cols

    def stiffness(self, gamma: np.ndarray) -> csc_matrix:
        """Assembled dof stiffness matrix for the given element conductivities"""
        gamma = _check_conductivity(gamma, self.mesh)
        rows, cols = self._assembly_index
        values = (gamma[:, None, None] * self._local_stiffness).ravel()
        return coo_matrix((values, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsc()

    def drive_vectors(self, amplitude: float = 1.0, drives: Optional[List[int]] = None) -> np.ndarray:
        """Right-hand sides of the requested drives, shape (n_dofs, n_drives)"""
        E = self.layout.E
        drives = list(range(E)) if drives is None else drives
        B = np.zeros((self.n_dofs, len(drives)))
        for column, j in enumerate(drives):
            if not 0 <= j < E:
                raise ValueError(f"drive index must lie in [0, {E}), got {j}")
            B[self.electrode_dofs[j], column] = amplitude
            B[self.electrode_dofs[(j + 1) % E], column] = -amplitude
        return B

    def solve_dofs(
        self, gamma: np.ndarray, amplitude: float = 1.0, drives: Optional[List[int]] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Solve every requested drive with one factorization.

        Returns:
            (dof potentials of shape (n_dofs, n_drives), relative residual per drive)
        """
        K = self.stiffness(gamma)
        B = self.drive_vectors(amplitude, drives)
        keep = self.kept_dofs
        K_red = K[keep][:, keep].tocsc()
        try:
            lu = splu(K_red)
        except RuntimeError as e:
            logger.error(f"Factorization failed: {e}")
            raise ForwardSolveError(f"singular shunt-model system: {e}") from e

        U = np.zeros_like(B)
        U[keep] = lu.solve(B[keep])
        residual = np.linalg.norm(K_red @ U[keep] - B[keep], axis=0) / np.maximum(
            np.linalg.norm(B[keep], axis=0), np.finfo(float).tiny
        )
        worst = float(residual.max(initial=0.0))
        if not np.all(np.isfinite(U)) or worst > self.tol:
            logger.error(f"Forward solve residual {worst:.3e} exceeds tolerance {self.tol:.1e}")
            raise ForwardSolveError("forward solve did not reach tolerance", residual=worst)

        # Grounding: electrode potentials sum to zero
        U -= U[self.electrode_dofs].mean(axis=0, keepdims=True)
        return U, residual

    def electrode_currents(self, gamma: np.ndarray, dof_potentials: np.ndarray) -> np.ndarray:
        """Net current leaving through each electrode, shape (E, n_drives)"""
        K = self.stiffness(gamma)
        return (K @ dof_potentials)[self.electrode_dofs]

    def electrode_potentials(self, gamma: np.ndarray, amplitude: float = 1.0) -> np.ndarray:
        """U[j, i]: potential of electrode i under drive j"""
        U, _ = self.solve_dofs(gamma, amplitude)
        return U[self.electrode_dofs].T

    def nodal(self, dof_potentials: np.ndarray) -> np.ndarray:
        """Nodal values, shape (n_drives, n_nodes)"""
        return dof_potentials[self.dof_of_node].T

    def measure(self, gamma: np.ndarray, amplitude: float = 1.0) -> MeasurementFrame:
        U = self.electrode_potentials(gamma, amplitude)
        E = self.layout.E
        j, k = measurement_pairs(E)
        values = U[j, k] - U[j, (k + 1) % E]
        return MeasurementFrame(values=values, E=E, amplitude=amplitude)


def solve_drive(
    mesh: Mesh, layout: ElectrodeLayout, gamma: np.ndarray, pattern: DrivePattern, tol: Optional[float] = None
) -> NodalPotential:
    """Potential of a single adjacent-pair drive"""
    model = ForwardModel(mesh, layout, tol=tol)
    U, residual = model.solve_dofs(gamma, pattern.amplitude, drives=[pattern.j])
    return NodalPotential(
        nodal=model.nodal(U)[0],
        electrode_potentials=U[model.electrode_dofs, 0],
        drive=pattern,
        residual=float(residual[0]),
    )


def measure(
    mesh: Mesh, layout: ElectrodeLayout, gamma: np.ndarray, amplitude: float = 1.0, tol: Optional[float] = None
) -> MeasurementFrame:
    """Full adjacent-adjacent measurement frame for conductivity gamma"""
    return ForwardModel(mesh, layout, tol=tol).measure(gamma, amplitude)


def difference_frame(frame_t: MeasurementFrame, frame_t0: MeasurementFrame) -> MeasurementFrame:
    """Time-difference data V_t - V_t0"""
    if frame_t.E != frame_t0.E:
        raise DimensionMismatchError("measurement frame", len(frame_t0), len(frame_t))
    if frame_t.amplitude != frame_t0.amplitude:
        raise ValueError(f"drive amplitudes differ: {frame_t.amplitude} vs {frame_t0.amplitude}")
    return frame_t.with_values(frame_t.values - frame_t0.values)


def add_noise(frame: MeasurementFrame, level: float, seed: int) -> MeasurementFrame:
    """Independent Gaussian noise with standard deviation level * RMS(frame) per component"""
    if level < 0:
        raise ValueError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return frame.with_values(frame.values.copy())
    rng = np.random.default_rng(seed)
    std = level * float(np.sqrt(np.mean(frame.values**2)))
    return frame.with_values(frame.values + rng.normal(0.0, std, size=len(frame)))


def save_frame(directory: Union[str, Path], frame: MeasurementFrame, name: str = "frame") -> Path:
    """JSON header plus little-endian float32 values"""
    directory = Path(directory)
    header = {
        "E": frame.E,
        "I": frame.amplitude,
        "ordering": FRAME_ORDERING,
        "values": save_blob(directory / f"{name}.f32", frame.values, "f4"),
    }
    return write_json(directory / f"{name}.json", header)


def load_frame(directory: Union[str, Path], name: str = "frame") -> MeasurementFrame:
    directory = Path(directory)
    header = read_json(directory / f"{name}.json")
    if header.get("ordering") != FRAME_ORDERING:
        raise ValueError(f"unsupported frame ordering {header.get('ordering')!r}")
    values = load_blob(directory, header["values"]).astype(np.float64)
    return MeasurementFrame(values=values, E=int(header["E"]), amplitude=float(header["I"]))
