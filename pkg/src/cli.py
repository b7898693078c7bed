"""
Command Line Interface
One subcommand per pipeline stage; every run dumps its resolved config and metrics beside its outputs
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError

from .analytics import tracker
from .artifacts import load_blob, read_json, save_blob, write_json
from .baseline_recon import TikhonovConfig, TVConfig, tikhonov, total_variation
from .config import create_directories, settings
from .diffkit import ParameterSet, configure_determinism
from .errors import (
    ArtifactMismatchError,
    ForwardSolveError,
    LungEitError,
    TrainingDivergedError,
    VerificationError,
)
from .fem_forward import ForwardModel, add_noise, difference_frame, load_frame, save_frame
from .geometry import (
    ElectrodeLayout,
    Mesh,
    build_disk_mesh,
    build_pixel_grid,
    build_thorax_mesh,
    load_mesh,
    rasterize,
    save_mesh,
)
from .imaging import normalize_max_abs, save_mosaic, save_png
from .latent_regressor import RegressorModel, build_targets, latent_mse, save_regressor, train_stage2
from .phantom_data import PhantomFamily, build_dataset, load_dataset, noise_seed, render, sample_phantom, save_dataset
from .pipeline import (
    ForwardContext,
    image_metrics,
    interpolation_check,
    latent_interpolation,
    load_pipeline,
    reconstruct_steps,
    report_directory,
    run_comparison,
    sample_phantom_pairs,
    save_manifold_figures,
    stability_probe,
)
from .preprocess_filter import build_filter
from .sensitivity import (
    assemble,
    kernel_dimension,
    load_sensitivity,
    numerical_rank,
    save_sensitivity,
    sensitivity_map,
)
from .vae import VaeModel, load_vae, model_hash, reconstruction_errors, save_vae, train_stage1
from .verification import run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_DIVERGED = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


# ---------------------------------------------------------------------------
# Run configurations
# ---------------------------------------------------------------------------


class RunConfig(BaseModel):
    """Fields sharing a name with LungEitSettings take their defaults from it"""

    model_config = ConfigDict(extra="ignore")

    command: str
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    out: Optional[str] = None

    def input_dir(self, value: Optional[str], stage: str) -> Path:
        return Path(value) if value else Path(settings.output_root) / stage


class MeshConfig(RunConfig):
    domain: Literal["disk", "thorax"] = "disk"
    electrodes: int = Field(16, ge=4)
    coverage_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    target_elements: int = Field(800, ge=1)
    grid_size: int = Field(32, ge=2)
    aspect_ratio: float = Field(1.3, gt=0.0)
    drive_amplitude: float = Field(1.0, gt=0.0)


class SimulateConfig(RunConfig):
    mesh: Optional[str] = None
    family: PhantomFamily = PhantomFamily.NORMAL
    ventilation_phase: Optional[float] = Field(None, ge=0.0, le=1.0)
    noise_level: float = Field(0.05, ge=0.0)
    drive_amplitude: float = Field(1.0, gt=0.0)


class MakeDatasetConfig(MeshConfig):
    n_base: int = Field(200, ge=1)
    n_noise: int = Field(10, ge=1)
    noise_level: float = Field(0.05, ge=0.0)
    family: PhantomFamily = PhantomFamily.MIXED
    filter_scale: float = Field(1e-3, gt=0.0)
    lambda_f: Optional[float] = Field(None, gt=0.0)


class TrainingConfig(RunConfig):
    # Batch-normalized layers need two samples per minibatch
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-3, gt=0.0)


class TrainVaeConfig(TrainingConfig):
    dataset: Optional[str] = None
    latent_dim: int = Field(16, ge=1)
    kl_formula: Literal["standard", "half-log"] = "standard"
    deterministic: bool = False


class TrainRegressorConfig(TrainingConfig):
    dataset: Optional[str] = None
    vae: Optional[str] = None
    regressor_widths: List[PositiveInt] = Field(default_factory=lambda: [256, 256, 256], min_length=1)


class PipelineConfig(RunConfig):
    dataset: Optional[str] = None
    vae: Optional[str] = None
    regressor: Optional[str] = None


class ReconstructConfig(PipelineConfig):
    frame: Optional[str] = None


class TvFlags(BaseModel):
    tv_epsilon: float = Field(1e-4, gt=0.0)
    tv_max_iters: int = Field(50, ge=1)
    tv_conv_tol: float = Field(1e-6, gt=0.0)


class BaselineConfig(RunConfig, TvFlags):
    mesh: Optional[str] = None
    frame: Optional[str] = None
    method: Literal["tikhonov", "tv", "both"] = "both"
    lam: Optional[float] = Field(None, gt=0.0)
    noise_level: float = Field(0.05, ge=0.0)


class CompareConfig(PipelineConfig, TvFlags):
    cases: List[PhantomFamily] = [PhantomFamily.NORMAL, PhantomFamily.OBESE]
    n_cases: int = Field(20, ge=1)
    noise_level: float = Field(0.05, ge=0.0)
    no_tv: bool = False


class ManifoldConfig(RunConfig):
    vae: Optional[str] = None
    dataset: Optional[str] = None
    resolution: int = Field(11, ge=2)
    interpolate: bool = False
    n_pairs: int = Field(20, ge=1)


class StabilityConfig(PipelineConfig):
    n_pairs: int = Field(50, ge=1)
    family: PhantomFamily = PhantomFamily.MIXED


class VerifyConfig(RunConfig):
    electrodes: int = Field(16, ge=4)
    target_elements: int = Field(400, ge=1)


def resolve_config(
    config_cls: Type[RunConfig], command: str, flags: Dict[str, Any], config_file: Optional[str] = None
) -> RunConfig:
    """Settings defaults < JSON config file < command-line flags"""
    fields = config_cls.model_fields
    data = {k: v for k, v in settings.model_dump().items() if k in fields}
    if config_file:
        data.update({k: v for k, v in read_json(config_file).items() if k in fields})
    data.update({k: v for k, v in flags.items() if k in fields})
    data["command"] = command
    config = config_cls(**data)
    if config.out is None:
        config.out = str(Path(settings.output_root) / DEFAULT_DIRS[command])
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _build_mesh(cfg: MeshConfig) -> Tuple[Mesh, ElectrodeLayout]:
    if cfg.domain == "thorax":
        return build_thorax_mesh(cfg.aspect_ratio, cfg.target_elements, cfg.electrodes, cfg.coverage_fraction)
    return build_disk_mesh(1.0, cfg.target_elements, cfg.electrodes, cfg.coverage_fraction)


def cmd_mesh_gen(cfg: MeshConfig, out: Path) -> Dict[str, Any]:
    mesh, layout = _build_mesh(cfg)
    S = assemble(mesh, layout, amplitude=cfg.drive_amplitude)
    grid = build_pixel_grid(mesh, cfg.grid_size)
    save_mesh(out, mesh, layout, cfg.grid_size)
    save_sensitivity(out, S)
    log_map = np.log10(rasterize(sensitivity_map(S, mesh), grid) + 1e-12)
    save_png(out / "sensitivity_map.png", log_map, signed=False, mask=grid.domain_mask)
    rank = numerical_rank(S)
    return {
        "n_nodes": mesh.n_nodes,
        "n_elements": mesh.n_elements,
        "min_angle_deg": float(mesh.min_angles().min()),
        "rows": S.shape[0],
        "rank": rank,
        "kernel_dimension_elements": kernel_dimension(S),
        "kernel_dimension_pixels": kernel_dimension(S, d_pixels=int(grid.domain_mask.sum())),
    }


def cmd_simulate(cfg: SimulateConfig, out: Path) -> Dict[str, Any]:
    mesh, layout, grid_size = load_mesh(cfg.input_dir(cfg.mesh, "mesh"))
    grid = build_pixel_grid(mesh, grid_size)
    params = sample_phantom(cfg.family, cfg.seed, cfg.ventilation_phase)
    gamma_dot = render(params, mesh)
    model = ForwardModel(mesh, layout)
    reference = model.measure(np.ones(mesh.n_elements), cfg.drive_amplitude)
    clean = difference_frame(model.measure(1.0 + gamma_dot, cfg.drive_amplitude), reference)
    noisy = add_noise(clean, cfg.noise_level, noise_seed(cfg.seed, 0, 0))

    save_frame(out, noisy, "frame")
    save_frame(out, clean, "clean_frame")
    write_json(
        out / "truth.json",
        {
            "params": params.to_dict(),
            "n_elements": mesh.n_elements,
            "values": save_blob(out / "truth.f8", gamma_dot, "f8"),
        },
    )
    save_png(out / "truth.png", rasterize(gamma_dot, grid), mask=grid.domain_mask, scale=8)
    return {"family": params.family, "rms_clean": float(np.sqrt(np.mean(clean.values**2)))}


def cmd_make_dataset(cfg: MakeDatasetConfig, out: Path) -> Dict[str, Any]:
    mesh, layout = _build_mesh(cfg)
    S = assemble(mesh, layout, amplitude=cfg.drive_amplitude)
    boundary_filter = build_filter(S, mesh, lambda_f=cfg.lambda_f, scale=cfg.filter_scale)
    dataset = build_dataset(
        mesh,
        layout,
        S,
        boundary_filter,
        n_base=cfg.n_base,
        n_noise=cfg.n_noise,
        noise_level=cfg.noise_level,
        seed=cfg.seed,
        grid_size=cfg.grid_size,
        family=cfg.family,
        amplitude=cfg.drive_amplitude,
        max_workers=cfg.threads,
    )
    save_dataset(out, dataset)
    tracker.increment("pairs", dataset.n_pairs)
    return {"n_pairs": dataset.n_pairs, "c_norm": dataset.c_norm, "dataset_hash": dataset.hash}


def cmd_train_vae(cfg: TrainVaeConfig, out: Path) -> Dict[str, Any]:
    dataset = load_dataset(cfg.input_dir(cfg.dataset, "dataset"))
    vae = VaeModel(
        latent_dim=cfg.latent_dim,
        grid_size=dataset.grid_size,
        E=int(dataset.manifest["E"]),
        mask=dataset.grid.domain_mask,
        c_norm=dataset.c_norm,
        kl_formula=cfg.kl_formula,
        variational=not cfg.deterministic,
        seed=cfg.seed,
    )
    train_pairs = dataset.pair_indices("train")
    params = ParameterSet(vae, lr=cfg.learning_rate)
    result = train_stage1(
        vae,
        dataset.images,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.seed,
        index=dataset.base_of_pair(train_pairs),
        tracker=tracker,
        checkpoint_dir=out,
        params=params,
    )
    test = dataset.base_indices("test")
    errors = reconstruction_errors(vae, dataset.images[test]) if test.size else np.zeros(0)
    save_vae(
        out,
        vae,
        {
            "dataset_hash": dataset.hash,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "seed": cfg.seed,
            "step_count": result.steps,
            "loss_history": result.history,
        },
        params=params,
    )
    return {
        "final_loss": result.history[-1] if result.history else None,
        "test_mean_relative_error": float(errors.mean()) if errors.size else None,
    }


def cmd_train_regressor(cfg: TrainRegressorConfig, out: Path) -> Dict[str, Any]:
    dataset = load_dataset(cfg.input_dir(cfg.dataset, "dataset"))
    vae, vae_manifest = load_vae(cfg.input_dir(cfg.vae, "vae"))
    if vae_manifest.get("dataset_hash") != dataset.hash:
        raise ArtifactMismatchError("VAE was trained on a different dataset", vae_manifest.get("dataset_hash"))
    training_set = build_targets(vae, dataset, "train")
    regressor = RegressorModel(dataset.frames.shape[1], vae.latent_dim, cfg.regressor_widths, seed=cfg.seed)
    params = ParameterSet(regressor, lr=cfg.learning_rate)
    regressor, history = train_stage2(
        regressor,
        training_set,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.seed,
        tracker=tracker,
        checkpoint_dir=out,
        params=params,
    )
    test_set = build_targets(vae, dataset, "test")
    save_regressor(
        out,
        regressor,
        {
            "dataset_hash": dataset.hash,
            "vae_hash": model_hash(vae),
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "seed": cfg.seed,
            "loss_history": history,
        },
        params=params,
    )
    return {"final_loss": history[-1] if history else None, "test_latent_mse": latent_mse(regressor, test_set)}


def _pipeline(cfg: PipelineConfig):
    return load_pipeline(
        cfg.input_dir(cfg.dataset, "dataset"),
        cfg.input_dir(cfg.vae, "vae"),
        cfg.input_dir(cfg.regressor, "regressor"),
    )


def _truth_image(frame_dir: Path, mesh: Mesh, grid) -> Optional[np.ndarray]:
    if not (frame_dir / "truth.json").exists():
        return None
    truth = read_json(frame_dir / "truth.json")
    if truth["n_elements"] != mesh.n_elements:
        logger.warning("Ground truth was simulated on a different mesh; skipping metrics")
        return None
    return rasterize(load_blob(frame_dir, truth["values"]), grid)


def cmd_reconstruct(cfg: ReconstructConfig, out: Path) -> Dict[str, Any]:
    pipeline, dataset = _pipeline(cfg)
    frame_dir = cfg.input_dir(cfg.frame, "simulate")
    steps = reconstruct_steps(pipeline, load_frame(frame_dir))
    image = steps["image"]
    write_json(
        out / "reconstruction.json",
        {
            "latent": steps["latent"],
            "provenance": pipeline.hashes,
            "image": save_blob(out / "image.f32", image, "f4"),
        },
    )
    save_png(out / "image.png", image, vmax=pipeline.c_norm, mask=dataset.grid.domain_mask, scale=8)
    truth = _truth_image(frame_dir, dataset.mesh, dataset.grid)
    return image_metrics(image, truth) if truth is not None else {"max_abs": float(np.abs(image).max())}


def cmd_baseline(cfg: BaselineConfig, out: Path) -> Dict[str, Any]:
    mesh_dir = cfg.input_dir(cfg.mesh, "mesh")
    mesh, layout, grid_size = load_mesh(mesh_dir)
    grid = build_pixel_grid(mesh, grid_size)
    frame_dir = cfg.input_dir(cfg.frame, "simulate")
    frame = load_frame(frame_dir)
    if (mesh_dir / "sensitivity.json").exists():
        S = load_sensitivity(mesh_dir)
    else:
        S = assemble(mesh, layout, amplitude=frame.amplitude)
    truth = _truth_image(frame_dir, mesh, grid)

    summary: Dict[str, Any] = {}
    results: Dict[str, np.ndarray] = {}
    if cfg.method in ("tikhonov", "both"):
        results["tikhonov"] = tikhonov(S, frame, TikhonovConfig(lam=cfg.lam, noise_level=cfg.noise_level))
    if cfg.method in ("tv", "both"):
        tv = total_variation(
            S,
            frame,
            mesh,
            TVConfig(cfg.lam, cfg.tv_epsilon, cfg.tv_max_iters, cfg.tv_conv_tol, cfg.noise_level),
        )
        results["tv"] = tv.gamma_dot
        summary["tv"] = {"lambda": tv.lam, "converged": tv.converged, "iterations": tv.iterations}
    for method, gamma_dot in results.items():
        image = rasterize(gamma_dot, grid)
        save_blob(out / f"{method}.f32", image, "f4")
        save_png(out / f"{method}.png", image, signed=False, scale=8)
        if truth is not None:
            summary.setdefault(method, {}).update(image_metrics(image, truth))
    write_json(out / "baseline.json", summary)
    return summary


def cmd_compare(cfg: CompareConfig, out: Path) -> Dict[str, Any]:
    pipeline, dataset = _pipeline(cfg)
    report = run_comparison(
        pipeline,
        ForwardContext.from_dataset(dataset),
        families=cfg.cases,
        n_cases=cfg.n_cases,
        noise_level=cfg.noise_level,
        seed=cfg.seed,
        tv_cfg=TVConfig(None, cfg.tv_epsilon, cfg.tv_max_iters, cfg.tv_conv_tol, cfg.noise_level),
        include_tv=not cfg.no_tv,
        max_workers=cfg.threads,
    )
    report.save(out)
    return report.summary()


def cmd_visualize_manifold(cfg: ManifoldConfig, out: Path) -> Dict[str, Any]:
    vae, _ = load_vae(cfg.input_dir(cfg.vae, "vae"))
    paths = save_manifold_figures(out, vae, cfg.resolution)
    summary: Dict[str, Any] = {"figures": [p.name for p in paths]}
    if cfg.interpolate:
        dataset = load_dataset(cfg.input_dir(cfg.dataset, "dataset"))
        images = dataset.images[dataset.base_indices("test")]
        if len(images) < 2:
            images = dataset.images
        rng = np.random.default_rng(cfg.seed)
        rows = []
        for _ in range(min(cfg.n_pairs, 8)):
            a, b = rng.choice(len(images), size=2, replace=False)
            interpolates = latent_interpolation(vae, images[a], images[b])
            rows.append([images[a], *interpolates, images[b]])
        save_mosaic(out / "interpolation.png", [[normalize_max_abs(t) for t in row] for row in rows])
        summary["interpolation"] = interpolation_check(vae, images, cfg.n_pairs, seed=cfg.seed)
    write_json(out / "manifold.json", summary)
    return summary


def cmd_stability_probe(cfg: StabilityConfig, out: Path) -> Dict[str, Any]:
    pipeline, dataset = _pipeline(cfg)
    table = stability_probe(
        pipeline,
        ForwardModel(dataset.mesh, dataset.layout),
        sample_phantom_pairs(cfg.n_pairs, cfg.seed, cfg.family),
        amplitude=float(dataset.manifest["I"]),
    )
    write_json(out / "stability.json", {"provenance": pipeline.hashes, **table.to_dict()})
    return {"rows": len(table), "max_recon_distance": float(table.envelope[-1]) if len(table) else 0.0}


def cmd_verify(cfg: VerifyConfig, out: Path) -> Dict[str, Any]:
    report = run_verification(cfg.electrodes, cfg.target_elements, cfg.seed)
    report.save(out)
    if not report.passed:
        raise VerificationError(f"failed checks: {', '.join(r.name for r in report.failures)}")
    return {"checks": len(report.results)}


Handler = Callable[[Any, Path], Dict[str, Any]]

COMMANDS: Dict[str, Tuple[Type[RunConfig], Handler, str]] = {
    "mesh-gen": (MeshConfig, cmd_mesh_gen, "Build a mesh, its sensitivity matrix and sensitivity map"),
    "simulate": (SimulateConfig, cmd_simulate, "Simulate one phantom's difference frame"),
    "make-dataset": (MakeDatasetConfig, cmd_make_dataset, "Generate the phantom training corpus"),
    "train-vae": (TrainVaeConfig, cmd_train_vae, "Stage 1: train the variational autoencoder"),
    "train-regressor": (TrainRegressorConfig, cmd_train_regressor, "Stage 2: train the frame-to-latent regressor"),
    "reconstruct": (ReconstructConfig, cmd_reconstruct, "Stage 3: reconstruct an image from a raw frame"),
    "baseline": (BaselineConfig, cmd_baseline, "Tikhonov / total-variation reconstruction of a raw frame"),
    "compare": (CompareConfig, cmd_compare, "Compare against the baselines on held-out phantoms"),
    "visualize-manifold": (ManifoldConfig, cmd_visualize_manifold, "Latent grid, axis walks and interpolations"),
    "stability-probe": (StabilityConfig, cmd_stability_probe, "Empirical modulus of continuity"),
    "verify": (VerifyConfig, cmd_verify, "Run the numerical property suite"),
}

DEFAULT_DIRS = {
    "mesh-gen": "mesh",
    "simulate": "simulate",
    "make-dataset": "dataset",
    "train-vae": "vae",
    "train-regressor": "regressor",
    "reconstruct": "reconstruct",
    "baseline": "baseline",
    "compare": "compare",
    "visualize-manifold": "manifold",
    "stability-probe": "stability",
    "verify": "verify",
}

TIMESTAMPED = {"compare", "stability-probe"}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with code 1"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mesh_flags(p: argparse.ArgumentParser):
    p.add_argument("--domain", choices=["disk", "thorax"])
    p.add_argument("--electrodes", "-E", type=int)
    p.add_argument("--coverage", dest="coverage_fraction", type=float)
    p.add_argument("--elements", dest="target_elements", type=int, help="Target element count")
    p.add_argument("--grid", dest="grid_size", type=int, help="Pixel grid side length")
    p.add_argument("--aspect-ratio", type=float, help="Thorax width / height")
    p.add_argument("--amplitude", dest="drive_amplitude", type=float, help="Drive current")


def _training_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)


def _pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", help="Dataset directory")
    p.add_argument("--vae", help="VAE checkpoint directory")
    p.add_argument("--regressor", help="Regressor checkpoint directory")


def _tv_flags(p: argparse.ArgumentParser):
    p.add_argument("--tv-epsilon", type=float)
    p.add_argument("--tv-max-iters", type=int)
    p.add_argument("--tv-conv-tol", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="lungeit", description="Manifold-constrained lung EIT reconstruction")
    subparsers = parser.add_subparsers(dest="command", required=True)
    families = [f.value for f in PhantomFamily]

    sub = {}
    for name, (_, _, help_text) in COMMANDS.items():
        p = subparsers.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of parameters; flags override it")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="Worker threads; 1 gives bit-reproducible runs")
        sub[name] = p

    _mesh_flags(sub["mesh-gen"])

    p = sub["simulate"]
    p.add_argument("--mesh", help="Mesh directory")
    p.add_argument("--family", choices=families)
    p.add_argument("--ventilation-phase", type=float)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--amplitude", dest="drive_amplitude", type=float)

    p = sub["make-dataset"]
    _mesh_flags(p)
    p.add_argument("--n-base", type=int, help="Number of base phantoms")
    p.add_argument("--n-noise", type=int, help="Noise replicates per phantom")
    p.add_argument("--noise-level", type=float)
    p.add_argument("--family", choices=families)
    p.add_argument("--filter-scale", type=float)
    p.add_argument("--lambda-f", type=float)

    p = sub["train-vae"]
    p.add_argument("--dataset")
    p.add_argument("--latent-dim", "-k", type=int)
    _training_flags(p)
    p.add_argument("--kl-formula", choices=["standard", "half-log"])
    p.add_argument("--deterministic", action="store_true", help="Plain autoencoder without KL term")

    p = sub["train-regressor"]
    p.add_argument("--dataset")
    p.add_argument("--vae")
    p.add_argument("--widths", dest="regressor_widths", type=int, nargs="+")
    _training_flags(p)

    p = sub["reconstruct"]
    _pipeline_flags(p)
    p.add_argument("--frame", help="Directory holding frame.json")

    p = sub["baseline"]
    p.add_argument("--mesh")
    p.add_argument("--frame")
    p.add_argument("--method", choices=["tikhonov", "tv", "both"])
    p.add_argument("--lam", type=float, help="Fixed lambda (default: discrepancy principle)")
    p.add_argument("--noise-level", type=float)
    _tv_flags(p)

    p = sub["compare"]
    _pipeline_flags(p)
    p.add_argument("--cases", nargs="+", choices=[PhantomFamily.NORMAL.value, PhantomFamily.OBESE.value])
    p.add_argument("--n-cases", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--no-tv", action="store_true")
    _tv_flags(p)

    p = sub["visualize-manifold"]
    p.add_argument("--vae")
    p.add_argument("--dataset")
    p.add_argument("--resolution", type=int)
    p.add_argument("--interpolate", action="store_true")
    p.add_argument("--n-pairs", type=int)

    p = sub["stability-probe"]
    _pipeline_flags(p)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--family", choices=families)

    p = sub["verify"]
    p.add_argument("--electrodes", "-E", type=int)
    p.add_argument("--elements", dest="target_elements", type=int)
    return parser


def setup_logging(level: str = "INFO"):
    create_directories()
    logs_dir = settings.logs_dir
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(Path(logs_dir) / "lungeit.log"), logging.StreamHandler()],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE

    setup_logging("DEBUG" if settings.debug else settings.log_level)
    flags = vars(args)
    command = flags.pop("command")
    config_file = flags.pop("config", None)
    config_cls, handler, _ = COMMANDS[command]
    try:
        cfg = resolve_config(config_cls, command, flags, config_file)
    except (ValidationError, OSError, json.JSONDecodeError) as e:
        logger.error(f"Invalid configuration for {command}: {e}")
        return EXIT_USAGE

    out = report_directory(cfg.out, DEFAULT_DIRS[command]) if command in TIMESTAMPED else Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "run_config.json", cfg.model_dump(mode="json"))
    configure_determinism(cfg.threads)
    tracker.reset()
    logger.info(f"Running {command} -> {out}")

    code, summary = EXIT_OK, {}
    try:
        with tracker.stage(command):
            summary = handler(cfg, out)
    except VerificationError as e:
        logger.error(f"Verification failed: {e}")
        code = EXIT_VERIFICATION
    except (TrainingDivergedError, ForwardSolveError) as e:
        logger.error(f"Numerical failure: {e}")
        code = EXIT_DIVERGED
    except ArtifactMismatchError as e:
        logger.error(f"Incompatible artifacts (offending hash {e.offending_hash}): {e}")
        code = EXIT_USAGE
    except (LungEitError, ValueError, OSError, KeyError) as e:
        logger.error(f"{command} failed: {e}")
        code = EXIT_USAGE

    tracker.export(out, extra={"command": command, "exit_code": code, "summary": summary})
    if code == EXIT_OK:
        logger.info(f"{command} finished: {summary}")
    return code


if __name__ == "__main__":
    sys.exit(main())
