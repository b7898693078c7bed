"""
Phantom Data Generation
Two-lung ellipse phantoms, forward simulation, boundary filtering, noise replication and splits
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .artifacts import content_hash, load_blob, read_json, save_blob, write_json
from .batch_processing import BatchRunner
from .errors import ArtifactMismatchError
from .fem_forward import FRAME_ORDERING, ForwardModel, MeasurementFrame, add_noise, difference_frame
from .geometry import ElectrodeLayout, Mesh, PixelGrid, build_pixel_grid, load_mesh, rasterize, save_mesh
from .preprocess_filter import BoundaryFilter, filter_frame
from .sensitivity import SensitivityMatrix, load_sensitivity, save_sensitivity

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = {"train": 0.8, "val": 0.1, "test": 0.1}
MIN_CONDUCTIVITY_CHANGE = -0.9
NOISE_MODEL = "gaussian, std = level * RMS(filtered frame), per (base, replicate) seed"


class PhantomFamily(str, Enum):
    NORMAL = "normal"
    OBESE = "obese"
    MIXED = "mixed"


@dataclass(frozen=True)
class Lung:
    """Ellipse in normalized domain coordinates (the domain maps to the unit disk)"""

    center: Tuple[float, float]
    axes: Tuple[float, float]
    rotation: float
    amplitude: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = c * d[:, 0] + s * d[:, 1]
        v = -s * d[:, 0] + c * d[:, 1]
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0

    def boundary_points(self, n: int = 256) -> np.ndarray:
        t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
        u, v = self.axes[0] * np.cos(t), self.axes[1] * np.sin(t)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([self.center[0] + c * u - s * v, self.center[1] + s * u + c * v], axis=1)

    @property
    def area(self) -> float:
        return math.pi * self.axes[0] * self.axes[1]


@dataclass(frozen=True)
class LungPhantomParams:
    """Base lung shapes plus the obese inward shift and the ventilation phase"""

    left: Lung
    right: Lung
    family: str = PhantomFamily.NORMAL.value
    depth_offset: float = 0.0
    ventilation_phase: float = 1.0

    def lungs(self) -> Tuple[Lung, Lung]:
        """Lungs after the depth offset (scaling toward the center) and ventilation phase"""
        shrink = 1.0 - self.depth_offset
        inflate = 0.6 + 0.4 * self.ventilation_phase
        return tuple(
            Lung(
                center=(lung.center[0] * shrink, lung.center[1] * shrink),
                axes=(lung.axes[0] * shrink * inflate, lung.axes[1] * shrink * inflate),
                rotation=lung.rotation,
                amplitude=lung.amplitude * self.ventilation_phase,
            )
            for lung in (self.left, self.right)
        )

    def boundary_distance(self) -> float:
        """Smallest distance between a lung boundary and the domain boundary, normalized coordinates"""
        points = np.concatenate([lung.boundary_points() for lung in self.lungs()])
        return float(np.min(1.0 - np.linalg.norm(points, axis=1)))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LungPhantomParams":
        def _lung(d: Dict[str, Any]) -> Lung:
            return Lung(
                center=tuple(d["center"]), axes=tuple(d["axes"]), rotation=d["rotation"], amplitude=d["amplitude"]
            )

        return cls(
            left=_lung(data["left"]),
            right=_lung(data["right"]),
            family=data["family"],
            depth_offset=data["depth_offset"],
            ventilation_phase=data["ventilation_phase"],
        )


def sample_phantom(
    family: Union[PhantomFamily, str], seed: int, ventilation_phase: Optional[float] = None
) -> LungPhantomParams:
    """Draw a two-lung phantom.

    The base shapes depend only on the seed, so the obese variant of a seed is the normal
    variant scaled toward the center by depth_offset.

    Args:
        family: normal, obese or mixed (coin flip between the two)
        seed: Integer seed
        ventilation_phase: Fixed phase in [0, 1]; drawn from [0.5, 1] when None

    Returns:
        LungPhantomParams
    """
    family = PhantomFamily(family)
    rng = np.random.default_rng(seed)
    lungs = []
    for side in (-1.0, 1.0):
        lungs.append(
            Lung(
                center=(side * rng.uniform(0.40, 0.48), rng.uniform(-0.1, 0.1)),
                axes=(rng.uniform(0.14, 0.22), rng.uniform(0.28, 0.40)),
                rotation=side * rng.uniform(-0.25, 0.25),
                amplitude=rng.uniform(-0.8, -0.45),
            )
        )
    depth = rng.uniform(0.25, 0.4)
    coin = rng.random()
    phase = rng.uniform(0.5, 1.0)

    if family is PhantomFamily.MIXED:
        family = PhantomFamily.OBESE if coin < 0.5 else PhantomFamily.NORMAL
    if ventilation_phase is not None:
        if not 0.0 <= ventilation_phase <= 1.0:
            raise ValueError(f"ventilation_phase must lie in [0, 1], got {ventilation_phase}")
        phase = ventilation_phase
    return LungPhantomParams(
        left=lungs[0],
        right=lungs[1],
        family=family.value,
        depth_offset=depth if family is PhantomFamily.OBESE else 0.0,
        ventilation_phase=phase,
    )


def render(params: LungPhantomParams, mesh: Mesh) -> np.ndarray:
    """Element values: lung amplitude where the element centroid lies inside a lung, else 0"""
    points = mesh.centroids / np.asarray(mesh.semi_axes)[None, :]
    values = np.zeros(mesh.n_elements)
    for lung in params.lungs():
        values[lung.contains(points)] += lung.amplitude
    return np.maximum(values, MIN_CONDUCTIVITY_CHANGE)


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def phantom_seed(seed: int, n: int) -> int:
    return _derived_seed(seed, 0, n)


def noise_seed(seed: int, n: int, replicate: int) -> int:
    return _derived_seed(seed, 1, n, replicate)


def case_seed(seed: int, i: int) -> int:
    """Seeds for held-out comparison cases, disjoint from dataset phantom seeds"""
    return _derived_seed(seed, 2, i)


def assign_splits(n_base: int) -> np.ndarray:
    """Split label per base phantom, contiguous by base index"""
    n_train = max(1, round(SPLIT_FRACTIONS["train"] * n_base))
    n_val = min(round(SPLIT_FRACTIONS["val"] * n_base), n_base - n_train)
    labels = np.array(["test"] * n_base, dtype=object)
    labels[:n_train] = "train"
    labels[n_train : n_train + n_val] = "val"
    return labels


@dataclass
class Dataset:
    """Normalized images per base phantom and filtered noisy frames per pair.

    Pair p belongs to base phantom p // n_noise.
    """

    manifest: Dict[str, Any]
    images: np.ndarray  # (n_base, H, W) float32, normalized by c_norm
    frames: np.ndarray  # (n_base * n_noise, rows) float32
    splits: np.ndarray  # split label per base phantom
    element_values: np.ndarray  # (n_base, n_elements) float64, un-normalized
    params: List[LungPhantomParams] = field(default_factory=list)
    mesh: Optional[Mesh] = None
    layout: Optional[ElectrodeLayout] = None
    sensitivity: Optional[SensitivityMatrix] = None
    boundary_filter: Optional[BoundaryFilter] = None
    grid: Optional[PixelGrid] = None

    @property
    def n_base(self) -> int:
        return int(self.manifest["n_base"])

    @property
    def n_noise(self) -> int:
        return int(self.manifest["n_noise"])

    @property
    def n_pairs(self) -> int:
        return int(self.frames.shape[0])

    @property
    def c_norm(self) -> float:
        return float(self.manifest["c_norm"])

    @property
    def grid_size(self) -> int:
        return int(self.manifest["grid_size"])

    @property
    def hash(self) -> str:
        return self.manifest["dataset_hash"]

    def base_of_pair(self, pairs: np.ndarray) -> np.ndarray:
        return np.asarray(pairs) // self.n_noise

    def base_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def pair_indices(self, split: str) -> np.ndarray:
        base = self.base_indices(split)
        return (base[:, None] * self.n_noise + np.arange(self.n_noise)[None, :]).ravel()

    def pair_images(self, pairs: np.ndarray) -> np.ndarray:
        return self.images[self.base_of_pair(pairs)]


def _simulate_base(
    n: int,
    params: LungPhantomParams,
    model: ForwardModel,
    reference: MeasurementFrame,
    boundary_filter: BoundaryFilter,
    n_noise: int,
    noise_level: float,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    gamma_dot = render(params, model.mesh)
    raw = difference_frame(model.measure(1.0 + gamma_dot, reference.amplitude), reference)
    clean = filter_frame(raw, boundary_filter)
    frames = np.stack([add_noise(clean, noise_level, noise_seed(seed, n, r)).values for r in range(n_noise)])
    return gamma_dot, frames


def build_dataset(
    mesh: Mesh,
    layout: ElectrodeLayout,
    S: SensitivityMatrix,
    boundary_filter: BoundaryFilter,
    n_base: int,
    n_noise: int,
    noise_level: float,
    seed: int,
    grid: Optional[PixelGrid] = None,
    grid_size: int = 32,
    family: Union[PhantomFamily, str] = PhantomFamily.MIXED,
    amplitude: float = 1.0,
    max_workers: int = 1,
) -> Dataset:
    """Simulate n_base phantoms and replicate each frame with n_noise seeded noise draws.

    Each frame is: nonlinear forward solve of 1 + gamma_dot, minus the homogeneous reference,
    boundary-filtered, plus noise. Images are normalized by c_norm = max |gamma_dot|.
    """
    if n_base < 1 or n_noise < 1:
        raise ValueError(f"n_base and n_noise must be >= 1, got {n_base}, {n_noise}")
    if noise_level < 0:
        raise ValueError(f"noise_level must be >= 0, got {noise_level}")
    grid = grid or build_pixel_grid(mesh, grid_size)
    model = ForwardModel(mesh, layout)
    reference = model.measure(np.ones(mesh.n_elements), amplitude)

    params = [sample_phantom(family, phantom_seed(seed, n)) for n in range(n_base)]
    job = BatchRunner(max_workers).run(
        "simulate-phantoms",
        lambda n, p: _simulate_base(n, p, model, reference, boundary_filter, n_noise, noise_level, seed),
        params,
    )
    job.raise_for_errors()

    element_values = np.stack([r[0] for r in job.results])
    frames = np.concatenate([r[1] for r in job.results]).astype(np.float32)
    c_norm = float(np.max(np.abs(element_values)))
    c_norm = c_norm if c_norm > 0 else 1.0
    images = np.stack([rasterize(v, grid) for v in element_values]) / c_norm
    images = np.clip(images, -1.0, 1.0).astype(np.float32)
    splits = assign_splits(n_base)

    manifest = {
        "n_base": n_base,
        "n_noise": n_noise,
        "n_pairs": n_base * n_noise,
        "noise_level": noise_level,
        "noise_model": NOISE_MODEL,
        "seed": seed,
        "family": PhantomFamily(family).value,
        "grid_size": grid.width,
        "E": layout.E,
        "I": amplitude,
        "coverage_fraction": layout.coverage_fraction,
        "n_elements": mesh.n_elements,
        "semi_axes": list(mesh.semi_axes),
        "frame_ordering": FRAME_ORDERING,
        "filter": boundary_filter.manifest(),
        "c_norm": c_norm,
        "split_fractions": SPLIT_FRACTIONS,
        "sensitivity_reference": S.reference_hash,
        "dataset_hash": content_hash(images, frames),
    }
    logger.info(
        f"Built dataset: {n_base} phantoms x {n_noise} noise draws = {frames.shape[0]} pairs, c_norm={c_norm:.4f}"
    )
    return Dataset(
        manifest=manifest,
        images=images,
        frames=frames,
        splits=splits,
        element_values=element_values,
        params=params,
        mesh=mesh,
        layout=layout,
        sensitivity=S,
        boundary_filter=boundary_filter,
        grid=grid,
    )


def regenerate_frame(dataset: Dataset, pair: int) -> np.ndarray:
    """Recompute one stored frame from its phantom and seeds (float32, as stored)"""
    n, r = divmod(int(pair), dataset.n_noise)
    model = ForwardModel(dataset.mesh, dataset.layout)
    reference = model.measure(np.ones(dataset.mesh.n_elements), float(dataset.manifest["I"]))
    gamma_dot = render(dataset.params[n], dataset.mesh)
    raw = difference_frame(model.measure(1.0 + gamma_dot, reference.amplitude), reference)
    clean = filter_frame(raw, dataset.boundary_filter)
    noisy = add_noise(clean, dataset.manifest["noise_level"], noise_seed(dataset.manifest["seed"], n, r))
    return noisy.values.astype(np.float32)


def save_dataset(directory: Union[str, Path], dataset: Dataset) -> Path:
    """manifest.json + images.f32 + frames.f32 + splits.json, with the mesh, sensitivity and filter alongside"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(directory / "mesh", dataset.mesh, dataset.layout, dataset.grid_size)
    save_sensitivity(directory, dataset.sensitivity)

    manifest = dict(dataset.manifest)
    manifest["blobs"] = {
        "images": save_blob(directory / "images.f32", dataset.images, "f4"),
        "frames": save_blob(directory / "frames.f32", dataset.frames, "f4"),
        "element_values": save_blob(directory / "element_values.f8", dataset.element_values, "f8"),
        "filter": save_blob(directory / "filter.f8", dataset.boundary_filter.operator, "f8"),
        "boundary_elements": save_blob(
            directory / "boundary_elements.u4", dataset.boundary_filter.boundary_elements, "u4"
        ),
    }
    write_json(directory / "splits.json", {"splits": dataset.splits.tolist()})
    write_json(directory / "phantoms.json", {"phantoms": [p.to_dict() for p in dataset.params]})
    path = write_json(directory / "manifest.json", manifest)
    logger.info(f"Saved dataset to {directory}")
    return path


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise ArtifactMismatchError(f"no dataset manifest in {directory}")
    manifest = read_json(directory / "manifest.json")
    blobs = manifest.pop("blobs")
    mesh, layout, grid_size = load_mesh(directory / "mesh")
    sensitivity = load_sensitivity(directory)
    if sensitivity.reference_hash != manifest["sensitivity_reference"]:
        raise ArtifactMismatchError("sensitivity does not match dataset", sensitivity.reference_hash)

    operator = load_blob(directory, blobs["filter"])
    operator.setflags(write=False)
    boundary_filter = BoundaryFilter(
        boundary_elements=load_blob(directory, blobs["boundary_elements"]).astype(np.int64),
        lambda_f=manifest["filter"]["lambda_f"],
        operator=operator,
        scale=manifest["filter"]["scale"],
    )
    images = load_blob(directory, blobs["images"])
    frames = load_blob(directory, blobs["frames"])
    if content_hash(images, frames) != manifest["dataset_hash"]:
        raise ArtifactMismatchError("dataset arrays do not match manifest", content_hash(images, frames))
    return Dataset(
        manifest=manifest,
        images=images,
        frames=frames,
        splits=np.array(read_json(directory / "splits.json")["splits"], dtype=object),
        element_values=load_blob(directory, blobs["element_values"]),
        params=[LungPhantomParams.from_dict(p) for p in read_json(directory / "phantoms.json")["phantoms"]],
        mesh=mesh,
        layout=layout,
        sensitivity=sensitivity,
        boundary_filter=boundary_filter,
        grid=build_pixel_grid(mesh, grid_size),
    )
