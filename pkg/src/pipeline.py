"""
Reconstruction Pipeline
Filter -> latent regression -> decoder reconstruction, baseline comparison, manifold visualization
and stability probing
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .artifacts import save_blob, write_json
from .baseline_recon import TikhonovConfig, TikhonovSolver, TVConfig, discrepancy_target, total_variation
from .batch_processing import BatchRunner
from .errors import ArtifactMismatchError, DimensionMismatchError, ModelConfigError
from .fem_forward import ForwardModel, MeasurementFrame, add_noise, difference_frame
from .geometry import ElectrodeLayout, Mesh, PixelGrid, rasterize, sample_to_elements
from .imaging import normalize_max_abs, save_mosaic
from .latent_regressor import RegressorModel, load_regressor, predict
from .phantom_data import (
    Dataset,
    LungPhantomParams,
    PhantomFamily,
    case_seed,
    load_dataset,
    noise_seed,
    render,
    sample_phantom,
)
from .preprocess_filter import BoundaryFilter
from .sensitivity import SensitivityMatrix, as_matrix
from .vae import VaeModel, decode, encode, load_vae, model_hash

logger = logging.getLogger(__name__)

SUPPORT_FRACTION = 0.5
PHANTOM_RANGE = (-1.0, 0.05)
AXIS_DELTAS = tuple(range(-6, 7))


@dataclass
class ReconPipeline:
    """f(V) = c_norm * decode(predict(filter(V)))"""

    boundary_filter: BoundaryFilter
    regressor: RegressorModel
    vae: VaeModel
    c_norm: float
    hashes: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.regressor.latent_dim != self.vae.latent_dim:
            raise ArtifactMismatchError(
                f"regressor latent dim {self.regressor.latent_dim} != VAE latent dim {self.vae.latent_dim}"
            )
        if self.regressor.input_dim != self.boundary_filter.size:
            raise DimensionMismatchError("regressor input", self.boundary_filter.size, self.regressor.input_dim)
        if not np.isclose(self.vae.c_norm, self.c_norm, rtol=1e-9, atol=0.0):
            raise ArtifactMismatchError(f"VAE c_norm {self.vae.c_norm} != pipeline c_norm {self.c_norm}")

    @property
    def grid_size(self) -> int:
        return self.vae.grid_size


def load_pipeline(
    dataset_dir: Union[str, Path], vae_dir: Union[str, Path], regressor_dir: Union[str, Path]
) -> Tuple[ReconPipeline, Dataset]:
    """Assemble a pipeline from saved artifacts, checking the provenance chain dataset -> VAE -> regressor"""
    dataset = load_dataset(dataset_dir)
    vae, vae_manifest = load_vae(vae_dir)
    regressor, regressor_manifest = load_regressor(regressor_dir)

    if vae_manifest.get("dataset_hash") != dataset.hash:
        raise ArtifactMismatchError("VAE was trained on a different dataset", vae_manifest.get("dataset_hash"))
    vae_hash = model_hash(vae)
    if vae_hash != vae_manifest.get("model_hash"):
        raise ArtifactMismatchError("VAE tensors do not match their manifest", vae_hash)
    if regressor_manifest.get("vae_hash") != vae_hash:
        raise ArtifactMismatchError("regressor targets come from a different VAE", regressor_manifest.get("vae_hash"))

    pipeline = ReconPipeline(
        boundary_filter=dataset.boundary_filter,
        regressor=regressor,
        vae=vae,
        c_norm=dataset.c_norm,
        hashes={
            "dataset": dataset.hash,
            "vae": vae_hash,
            "regressor": model_hash(regressor),
        },
    )
    return pipeline, dataset


def _as_frame(raw_frame: Union[MeasurementFrame, np.ndarray], size: int) -> np.ndarray:
    values = raw_frame.values if isinstance(raw_frame, MeasurementFrame) else np.asarray(raw_frame, np.float64)
    if values.shape != (size,):
        raise DimensionMismatchError("measurement frame", size, values.size)
    return values


def reconstruct_steps(pipeline: ReconPipeline, raw_frame: Union[MeasurementFrame, np.ndarray]) -> Dict[str, Any]:
    """Intermediate results of one reconstruction: filtered frame, latent, normalized and final image"""
    values = _as_frame(raw_frame, pipeline.boundary_filter.size)
    filtered = pipeline.boundary_filter.apply(values)
    latent = predict(pipeline.regressor, filtered)
    normalized = decode(pipeline.vae, latent)
    return {
        "filtered": filtered,
        "latent": latent,
        "normalized": normalized,
        "image": normalized.astype(np.float64) * pipeline.c_norm,
    }


def reconstruct(pipeline: ReconPipeline, raw_frame: Union[MeasurementFrame, np.ndarray]) -> np.ndarray:
    """Conductivity-change image on the grid, in un-normalized units; |values| <= c_norm"""
    return reconstruct_steps(pipeline, raw_frame)["image"]


def reconstruct_batch(pipeline: ReconPipeline, raw_frames: np.ndarray) -> np.ndarray:
    raw_frames = np.asarray(raw_frames, dtype=np.float64)
    if raw_frames.ndim != 2 or raw_frames.shape[1] != pipeline.boundary_filter.size:
        raise DimensionMismatchError("measurement frame", pipeline.boundary_filter.size, raw_frames.shape[-1])
    latents = predict(pipeline.regressor, pipeline.boundary_filter.apply(raw_frames))
    return decode(pipeline.vae, latents).astype(np.float64) * pipeline.c_norm


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def relative_l2(estimate: np.ndarray, truth: np.ndarray) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    norm = np.linalg.norm(truth)
    error = np.linalg.norm(estimate - truth)
    return float(error / norm) if norm > 0 else float(error)


def support(image: np.ndarray, fraction: float = SUPPORT_FRACTION) -> np.ndarray:
    """Pixels with |value| >= fraction * max |value|; empty for an all-zero image"""
    magnitude = np.abs(np.asarray(image, dtype=np.float64))
    peak = float(magnitude.max(initial=0.0))
    if peak == 0:
        return np.zeros(magnitude.shape, dtype=bool)
    return magnitude >= fraction * peak


def dice(estimate: np.ndarray, truth: np.ndarray, fraction: float = SUPPORT_FRACTION) -> float:
    a, b = support(estimate, fraction), support(truth, fraction)
    total = int(a.sum() + b.sum())
    return 1.0 if total == 0 else float(2 * np.sum(a & b) / total)


def component_count(image: np.ndarray, fraction: float = SUPPORT_FRACTION) -> int:
    """4-connected components of the thresholded support"""
    _, n = ndimage.label(support(image, fraction))
    return int(n)


def image_metrics(estimate: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    return {
        "relative_l2": relative_l2(estimate, truth),
        "dice": dice(estimate, truth),
        "components": component_count(estimate),
    }


# ---------------------------------------------------------------------------
# Comparison experiment
# ---------------------------------------------------------------------------


@dataclass
class ForwardContext:
    """What is needed to simulate and baseline-reconstruct test cases"""

    mesh: Mesh
    layout: ElectrodeLayout
    sensitivity: SensitivityMatrix
    grid: PixelGrid
    amplitude: float = 1.0

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ForwardContext":
        return cls(
            mesh=dataset.mesh,
            layout=dataset.layout,
            sensitivity=dataset.sensitivity,
            grid=dataset.grid,
            amplitude=float(dataset.manifest["I"]),
        )


@dataclass
class CaseResult:
    case_id: int
    family: str
    seed: int
    truth: np.ndarray
    images: Dict[str, np.ndarray]
    metrics: Dict[str, Dict[str, float]]
    runtime: Dict[str, float]
    truth_components: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "case_id": self.case_id,
            "family": self.family,
            "seed": self.seed,
            "truth_components": self.truth_components,
            "metrics": self.metrics,
            "runtime": self.runtime,
        }


@dataclass
class ExperimentReport:
    """Per-case reconstructions and metrics for the proposed method and the baselines"""

    cases: List[CaseResult] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, str] = field(default_factory=dict)

    @property
    def methods(self) -> List[str]:
        return list(self.cases[0].metrics) if self.cases else []

    def family_cases(self, family: str) -> List[CaseResult]:
        return [c for c in self.cases if c.family == family]

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for family in sorted({c.family for c in self.cases}):
            cases = self.family_cases(family)
            stats: Dict[str, Any] = {"n_cases": len(cases)}
            for method in self.methods:
                errors = [c.metrics[method]["relative_l2"] for c in cases]
                counts = [c.metrics[method]["components"] for c in cases]
                stats[method] = {
                    "mean_relative_l2": float(np.mean(errors)),
                    "median_relative_l2": float(np.median(errors)),
                    "mean_dice": float(np.mean([c.metrics[method]["dice"] for c in cases])),
                    "fraction_two_components": float(np.mean([n == 2 for n in counts])),
                    "fraction_merged": float(np.mean([n == 1 for n in counts])),
                }
            if "proposed" in self.methods and "tikhonov" in self.methods:
                stats["proposed_beats_tikhonov"] = float(
                    np.mean(
                        [c.metrics["proposed"]["relative_l2"] < c.metrics["tikhonov"]["relative_l2"] for c in cases]
                    )
                )
            out[family] = stats
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "provenance": self.provenance,
            "summary": self.summary(),
            "cases": [c.to_dict() for c in self.cases],
        }

    def save(self, directory: Union[str, Path]) -> Path:
        """report.json, one mosaic PNG per case (each tile max-abs normalized) and raw float blobs"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blobs: Dict[str, Dict[str, Any]] = {}
        for case in self.cases:
            name = f"case_{case.case_id:03d}_{case.family}"
            tiles = [normalize_max_abs(case.truth)] + [normalize_max_abs(case.images[m]) for m in self.methods]
            save_mosaic(directory / f"{name}.png", [tiles])
            blobs[name] = {
                key: save_blob(directory / "raw" / f"{name}_{key}.f32", image, "f4")
                for key, image in [("truth", case.truth), *case.images.items()]
            }
        report = self.to_dict()
        report["blobs"] = blobs
        path = write_json(directory / "report.json", report)
        logger.info(f"Saved comparison report to {path}")
        return path


def simulate_case(
    params: LungPhantomParams, model: ForwardModel, reference: MeasurementFrame, noise_level: float, seed: int
) -> Tuple[np.ndarray, MeasurementFrame]:
    """Element values and the raw (unfiltered) noisy difference frame of one test phantom"""
    gamma_dot = render(params, model.mesh)
    raw = difference_frame(model.measure(1.0 + gamma_dot, reference.amplitude), reference)
    return gamma_dot, add_noise(raw, noise_level, seed)


def run_comparison(
    pipeline: ReconPipeline,
    context: ForwardContext,
    families: Sequence[Union[PhantomFamily, str]] = (PhantomFamily.NORMAL, PhantomFamily.OBESE),
    n_cases: int = 20,
    noise_level: float = 0.05,
    seed: int = 0,
    tikhonov_cfg: Optional[TikhonovConfig] = None,
    tv_cfg: Optional[TVConfig] = None,
    include_tv: bool = True,
    max_workers: int = 1,
) -> ExperimentReport:
    """Reconstruct held-out phantoms with the pipeline, Tikhonov and (optionally) TV.

    Case seeds come from case_seed, a stream disjoint from the dataset's phantom seeds. Baselines
    see the raw noisy frame; their regularization is set by the discrepancy principle unless the
    configs fix lambda.
    """
    tikhonov_cfg = tikhonov_cfg or TikhonovConfig(noise_level=noise_level)
    tv_cfg = tv_cfg or TVConfig(noise_level=noise_level)
    model = ForwardModel(context.mesh, context.layout)
    reference = model.measure(np.ones(context.mesh.n_elements), context.amplitude)
    solver = TikhonovSolver(context.sensitivity)
    S = as_matrix(context.sensitivity)

    items = []
    for family in families:
        family = PhantomFamily(family)
        for _ in range(n_cases):
            s = case_seed(seed, len(items))
            items.append((family.value, s, sample_phantom(family, s)))

    def run_case(index: int, item: Tuple[str, int, LungPhantomParams]) -> CaseResult:
        family, s, params = item
        gamma_dot, frame = simulate_case(params, model, reference, noise_level, noise_seed(s, 0, 0))
        truth = rasterize(gamma_dot, context.grid)
        images, runtime = {}, {}

        start = time.perf_counter()
        images["proposed"] = reconstruct(pipeline, frame)
        runtime["proposed"] = time.perf_counter() - start

        start = time.perf_counter()
        lam = tikhonov_cfg.lam
        if lam is None:
            lam = solver.discrepancy_lambda(frame, discrepancy_target(frame.values, tikhonov_cfg.noise_level))
        images["tikhonov"] = rasterize(solver.solve(frame, lam), context.grid)
        runtime["tikhonov"] = time.perf_counter() - start

        if include_tv:
            start = time.perf_counter()
            images["tv"] = rasterize(total_variation(S, frame, context.mesh, tv_cfg).gamma_dot, context.grid)
            runtime["tv"] = time.perf_counter() - start

        return CaseResult(
            case_id=index,
            family=family,
            seed=s,
            truth=truth,
            images=images,
            metrics={method: image_metrics(image, truth) for method, image in images.items()},
            runtime=runtime,
            truth_components=component_count(truth),
        )

    job = BatchRunner(max_workers).run("compare", run_case, items)
    job.raise_for_errors()
    report = ExperimentReport(
        cases=job.results,
        config={
            "families": [PhantomFamily(f).value for f in families],
            "n_cases": n_cases,
            "noise_level": noise_level,
            "seed": seed,
            "tikhonov": asdict(tikhonov_cfg),
            "tv": asdict(tv_cfg) if include_tv else None,
            "support_fraction": SUPPORT_FRACTION,
            "display_normalization": "each tile divided by its own max |value|",
        },
        provenance=dict(pipeline.hashes),
    )
    for family, stats in report.summary().items():
        logger.info(f"Comparison [{family}]: {stats}")
    return report


# ---------------------------------------------------------------------------
# Manifold visualization
# ---------------------------------------------------------------------------


def latent_grid_images(vae: VaeModel, resolution: int = 11, box: float = 3.0) -> np.ndarray:
    """(resolution, resolution, H, W) decoded tiles; tile (i, j) decodes (g_i, g_j) with g = linspace(-box, box)"""
    if vae.latent_dim != 2:
        raise ModelConfigError(f"latent grid needs a 2-dimensional latent space, got k={vae.latent_dim}")
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    g = np.linspace(-box, box, resolution)
    points = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    images = decode(vae, points)
    return images.reshape(resolution, resolution, *images.shape[1:]).astype(np.float64)


@dataclass
class AxisWalk:
    """Decoded images along h = delta * e_axis and their consecutive differences, in normalized units"""

    axis: int
    deltas: Tuple[float, ...]
    images: np.ndarray  # (len(deltas), H, W)
    tangents: np.ndarray  # (len(deltas) - 1, H, W)


def latent_axis_walk(vae: VaeModel, axis: int, deltas: Sequence[float] = AXIS_DELTAS) -> AxisWalk:
    if not 0 <= axis < vae.latent_dim:
        raise ValueError(f"axis must lie in [0, {vae.latent_dim}), got {axis}")
    deltas = tuple(float(d) for d in deltas)
    h = np.zeros((len(deltas), vae.latent_dim))
    h[:, axis] = deltas
    images = decode(vae, h).astype(np.float64)
    return AxisWalk(axis=axis, deltas=deltas, images=images, tangents=np.diff(images, axis=0))


def latent_interpolation(
    vae: VaeModel, image_a: np.ndarray, image_b: np.ndarray, ts: Sequence[float] = (0.25, 0.5, 0.75)
) -> np.ndarray:
    """Decodes of (1 - t) mu(a) + t mu(b) for each t, normalized units"""
    mu = encode(vae, np.stack([image_a, image_b])).mu
    ts = np.asarray(ts, dtype=np.float64)[:, None]
    return decode(vae, (1.0 - ts) * mu[0] + ts * mu[1]).astype(np.float64)


def interpolation_check(
    vae: VaeModel,
    images: np.ndarray,
    n_pairs: int = 20,
    ts: Sequence[float] = (0.25, 0.5, 0.75),
    seed: int = 0,
    value_range: Tuple[float, float] = PHANTOM_RANGE,
) -> Dict[str, Any]:
    """Fraction of in-range pixels and support component counts of interpolates between random image pairs"""
    rng = np.random.default_rng(seed)
    in_range, counts = [], []
    for _ in range(n_pairs):
        a, b = rng.choice(len(images), size=2, replace=False)
        for image in latent_interpolation(vae, images[a], images[b], ts):
            in_range.append(float(np.mean((image >= value_range[0]) & (image <= value_range[1]))))
            counts.append(component_count(image))
    return {
        "min_fraction_in_range": float(min(in_range)),
        "component_counts": counts,
        "fraction_one_or_two_components": float(np.mean([c in (1, 2) for c in counts])),
    }


def save_manifold_figures(
    directory: Union[str, Path], vae: VaeModel, resolution: int = 11, deltas: Sequence[float] = AXIS_DELTAS
) -> List[Path]:
    """Latent grid mosaic for k = 2, otherwise one image row and one tangent row per latent axis"""
    directory = Path(directory)
    paths = []
    if vae.latent_dim == 2:
        paths.append(save_mosaic(directory / "latent_grid.png", latent_grid_images(vae, resolution)))
    walks = [latent_axis_walk(vae, axis, deltas) for axis in range(vae.latent_dim)]
    paths.append(save_mosaic(directory / "axis_walks.png", np.stack([w.images for w in walks])))
    tangents = np.stack([np.stack([normalize_max_abs(t) for t in w.tangents]) for w in walks])
    paths.append(save_mosaic(directory / "axis_tangents.png", tangents))
    return paths


# ---------------------------------------------------------------------------
# Stability and data consistency
# ---------------------------------------------------------------------------


@dataclass
class StabilityTable:
    """Rows (data distance, reconstruction distance) sorted by data distance, plus the running-max envelope"""

    data_distance: np.ndarray
    recon_distance: np.ndarray
    envelope: np.ndarray

    def __len__(self) -> int:
        return int(self.data_distance.size)

    def modulus(self, delta: float) -> float:
        """Largest reconstruction distance observed among pairs with data distance <= delta"""
        idx = np.searchsorted(self.data_distance, delta, side="right")
        return float(self.envelope[idx - 1]) if idx > 0 else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data_distance": self.data_distance.tolist(),
            "recon_distance": self.recon_distance.tolist(),
            "envelope": self.envelope.tolist(),
        }


def sample_phantom_pairs(
    n_pairs: int, seed: int, family: Union[PhantomFamily, str] = PhantomFamily.MIXED
) -> List[Tuple[LungPhantomParams, LungPhantomParams]]:
    return [
        (sample_phantom(family, case_seed(seed, 2 * i)), sample_phantom(family, case_seed(seed, 2 * i + 1)))
        for i in range(n_pairs)
    ]


def stability_probe(
    pipeline: ReconPipeline,
    model: ForwardModel,
    phantom_pairs: Sequence[Tuple[LungPhantomParams, LungPhantomParams]],
    amplitude: float = 1.0,
) -> StabilityTable:
    """Empirical modulus of continuity of the reconstruction map over noiseless phantom pairs"""
    reference = model.measure(np.ones(model.mesh.n_elements), amplitude)
    cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def frame_and_image(params: LungPhantomParams) -> Tuple[np.ndarray, np.ndarray]:
        key = id(params)
        if key not in cache:
            gamma_dot = render(params, model.mesh)
            frame = difference_frame(model.measure(1.0 + gamma_dot, amplitude), reference).values
            cache[key] = (frame, reconstruct(pipeline, frame))
        return cache[key]

    rows = []
    for first, second in phantom_pairs:
        v1, x1 = frame_and_image(first)
        v2, x2 = frame_and_image(second)
        rows.append((float(np.linalg.norm(v1 - v2)), float(np.linalg.norm(x1 - x2))))
    rows.sort(key=lambda r: r[0])
    data = np.array([r[0] for r in rows])
    recon = np.array([r[1] for r in rows])
    return StabilityTable(data_distance=data, recon_distance=recon, envelope=np.maximum.accumulate(recon))


def linearized_residual(
    pipeline: ReconPipeline, context: ForwardContext, raw_frame: Union[MeasurementFrame, np.ndarray]
) -> float:
    """||S x - V|| / ||V|| with x the reconstruction sampled back onto the elements"""
    values = _as_frame(raw_frame, pipeline.boundary_filter.size)
    x = sample_to_elements(reconstruct(pipeline, values), context.grid, context.mesh)
    norm = np.linalg.norm(values)
    residual = np.linalg.norm(as_matrix(context.sensitivity) @ x - values)
    return float(residual / norm) if norm > 0 else float(residual)


def report_directory(root: Union[str, Path], name: str) -> Path:
    directory = Path(root) / f"{name}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
    directory.mkdir(parents=True, exist_ok=True)
    return directory
