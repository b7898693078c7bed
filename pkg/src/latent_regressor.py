"""
Latent Regressor
Dense network mapping filtered measurement frames to VAE latent means
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .analytics import RunTracker, tracker as default_tracker
from .diffkit import (
    LayerSpec,
    Network,
    ParameterSet,
    adam_step,
    index_loader,
    initialize,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ArtifactMismatchError, DimensionMismatchError, ModelConfigError, TrainingDivergedError
from .phantom_data import Dataset
from .vae import VaeModel, encode, model_hash

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (256, 256, 256)


def regressor_specs(input_dim: int, latent_dim: int, widths: Sequence[int] = DEFAULT_WIDTHS) -> List[LayerSpec]:
    specs = []
    n_in = input_dim
    for width in widths:
        specs += [LayerSpec.dense(n_in, width), LayerSpec.batchnorm(width), LayerSpec.relu()]
        n_in = width
    return specs + [LayerSpec.dense(n_in, latent_dim)]


class RegressorModel(nn.Module):
    """Standardizes a frame with stored training statistics, then [dense, batchnorm, relu] x L and a linear head"""

    def __init__(self, input_dim: int, latent_dim: int, widths: Sequence[int] = DEFAULT_WIDTHS, seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        self.widths = tuple(widths)
        self.seed = seed
        self.network = initialize(Network(regressor_specs(input_dim, latent_dim, widths), (input_dim,)), seed)
        self.register_buffer("input_mean", torch.zeros(input_dim))
        self.register_buffer("input_scale", torch.ones(input_dim))

    def set_standardization(self, frames: np.ndarray):
        frames = np.asarray(frames, dtype=np.float64)
        scale = frames.std(axis=0)
        scale[scale < np.finfo(np.float32).tiny] = 1.0
        self.input_mean.copy_(torch.from_numpy(frames.mean(axis=0)))
        self.input_scale.copy_(torch.from_numpy(scale))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.network((v - self.input_mean) / self.input_scale)

    def manifest(self) -> Dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "widths": list(self.widths),
            "init_seed": self.seed,
            "network": self.network.describe(),
        }


@dataclass
class LatentTrainingSet:
    """Filtered frames paired with the encoder mean of their phantom's image"""

    frames: np.ndarray  # (N, rows) float32
    targets: np.ndarray  # (N, k) float64
    dataset_hash: str
    vae_hash: str

    def __len__(self) -> int:
        return int(self.frames.shape[0])


def check_compatible(vae: VaeModel, dataset: Dataset):
    if vae.grid_size != dataset.grid_size:
        raise ArtifactMismatchError(f"VAE grid {vae.grid_size} does not match dataset grid {dataset.grid_size}")
    if not np.isclose(vae.c_norm, dataset.c_norm, rtol=1e-9, atol=0.0):
        raise ArtifactMismatchError(f"VAE c_norm {vae.c_norm} does not match dataset c_norm {dataset.c_norm}")
    if vae.E != int(dataset.manifest["E"]):
        raise ArtifactMismatchError(f"VAE built for E={vae.E}, dataset has E={dataset.manifest['E']}")


def build_targets(vae: VaeModel, dataset: Dataset, split: str = "train") -> LatentTrainingSet:
    """Targets h_n = mu(x_n), shared by all noise replicates of phantom n"""
    check_compatible(vae, dataset)
    base = dataset.base_indices(split)
    mu = encode(vae, dataset.images[base]).mu if base.size else np.zeros((0, vae.latent_dim))
    pairs = dataset.pair_indices(split)
    return LatentTrainingSet(
        frames=dataset.frames[pairs],
        targets=np.repeat(mu, dataset.n_noise, axis=0),
        dataset_hash=dataset.hash,
        vae_hash=model_hash(vae),
    )


def train_stage2(
    model: RegressorModel,
    training_set: LatentTrainingSet,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    tracker: Optional[RunTracker] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    params: Optional[ParameterSet] = None,
) -> Tuple[RegressorModel, List[float]]:
    """Minimize the minibatch mean of ||g(V) - h||^2 with the decoder frozen out of the loop"""
    tracker = tracker or default_tracker
    if training_set.frames.shape[1] != model.input_dim:
        raise DimensionMismatchError("measurement frame", model.input_dim, training_set.frames.shape[1])
    if training_set.targets.shape[1] != model.latent_dim:
        raise DimensionMismatchError("latent target", model.latent_dim, training_set.targets.shape[1])

    loader = index_loader(len(training_set), batch_size, seed)
    model.set_standardization(training_set.frames)
    frames = torch.from_numpy(np.ascontiguousarray(training_set.frames, dtype=np.float32))
    targets = torch.from_numpy(np.ascontiguousarray(training_set.targets, dtype=np.float32))
    params = params or ParameterSet(model, lr=lr)
    if params.module is not model:
        raise ModelConfigError("optimizer state belongs to a different model")
    history: List[float] = []

    for epoch in range(epochs):
        last_good = copy.deepcopy(model.state_dict())
        model.train()
        total, count = 0.0, 0
        for (batch,) in loader:
            loss = (model(frames[batch]) - targets[batch]).pow(2).sum(dim=1).mean()
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                checkpoint = None
                if checkpoint_dir is not None:
                    checkpoint = str(save_regressor(checkpoint_dir, model, {"diverged_epoch": epoch}))
                logger.error(f"Regressor loss became non-finite at epoch {epoch}")
                raise TrainingDivergedError("regressor", epoch, checkpoint)
            params.zero_grad()
            loss.backward()
            adam_step(params)
            total += float(loss) * len(batch)
            count += len(batch)
        history.append(total / max(count, 1))
        tracker.track_epoch("regressor", epoch, history[-1])
        logger.info(f"Regressor epoch {epoch + 1}/{epochs}: loss {history[-1]:.5f}")

    model.eval()
    return model, history


def predict(model: RegressorModel, frames: np.ndarray) -> np.ndarray:
    """Latent estimate for one frame (rows,) or a batch (B, rows), float64"""
    frames = np.asarray(frames, dtype=np.float32)
    single = frames.ndim == 1
    batch = frames[None] if single else frames
    if batch.shape[-1] != model.input_dim:
        raise DimensionMismatchError("measurement frame", model.input_dim, batch.shape[-1])
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(batch))).double().numpy()
    return out[0] if single else out


def latent_mse(model: RegressorModel, training_set: LatentTrainingSet) -> float:
    """Mean over samples of ||g(V) - h||^2"""
    if len(training_set) == 0:
        return 0.0
    return float(np.mean(np.sum((predict(model, training_set.frames) - training_set.targets) ** 2, axis=1)))


def replicate_separation(model: RegressorModel, dataset: Dataset, split: str = "test") -> float:
    """Spread of predictions across base phantoms divided by the spread within noise replicates"""
    pairs = dataset.pair_indices(split)
    if pairs.size == 0 or dataset.n_noise < 2:
        raise ValueError(f"split {split!r} needs phantoms with at least two noise replicates")
    preds = predict(model, dataset.frames[pairs]).reshape(-1, dataset.n_noise, model.latent_dim)
    centers = preds.mean(axis=1)
    within = np.sqrt(np.mean(np.sum((preds - centers[:, None]) ** 2, axis=2)))
    across = np.sqrt(np.mean(np.sum((centers - centers.mean(axis=0)) ** 2, axis=1)))
    return float(across / max(within, np.finfo(float).tiny))


def perturbation_response(
    model: RegressorModel, frames: np.ndarray, relative: float = 0.01, seed: int = 0
) -> np.ndarray:
    """||g(V + d) - g(V)|| per frame for random d with ||d|| = relative * ||V||, divided by the latent spread"""
    frames = np.asarray(frames, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(frames.shape)
    d *= (relative * np.linalg.norm(frames, axis=1) / np.linalg.norm(d, axis=1))[:, None]
    base = predict(model, frames)
    moved = predict(model, frames + d)
    spread = np.sqrt(np.mean(np.sum((base - base.mean(axis=0)) ** 2, axis=1)))
    return np.linalg.norm(moved - base, axis=1) / max(spread, np.finfo(float).tiny)


def save_regressor(
    directory: Union[str, Path],
    model: RegressorModel,
    extra: Optional[Dict[str, Any]] = None,
    params: Optional[ParameterSet] = None,
) -> Path:
    manifest = {**model.manifest(), **(extra or {}), "model_hash": model_hash(model)}
    return save_checkpoint(directory, model, manifest, name="regressor", params=params)


def load_regressor(directory: Union[str, Path]) -> Tuple[RegressorModel, Dict[str, Any]]:
    manifest, state = load_checkpoint(directory, name="regressor")
    model = RegressorModel(
        input_dim=manifest["input_dim"],
        latent_dim=manifest["latent_dim"],
        widths=manifest["widths"],
        seed=manifest["init_seed"],
    )
    model.load_state_dict(state)
    model.eval()
    return model, manifest
