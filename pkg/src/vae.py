"""
Variational Autoencoder
Convolutional encoder with mean and log-variance heads, transposed-convolution decoder,
KL loss and stage-one training on normalized conductivity images
"""

import copy
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .analytics import RunTracker, tracker as default_tracker
from .artifacts import content_hash
from .diffkit import (
    LayerSpec,
    Network,
    ParameterSet,
    adam_step,
    finite_difference_check,
    index_loader,
    initialize,
    load_checkpoint,
    sample_gaussian,
    save_checkpoint,
)
from .errors import DimensionMismatchError, ModelConfigError, TrainingDivergedError

logger = logging.getLogger(__name__)

ENCODER_CHANNELS = (16, 32, 64, 128)


class KLFormula(str, Enum):
    STANDARD = "standard"
    HALF_LOG = "half-log"


@dataclass
class LatentDistribution:
    """Diagonal Gaussian N(mu, diag(sigma^2)); sigma is None for the deterministic autoencoder"""

    mu: np.ndarray
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
            if self.sigma.shape != self.mu.shape:
                raise DimensionMismatchError("sigma", self.mu.size, self.sigma.size)


def encoder_specs(channels: Sequence[int] = ENCODER_CHANNELS) -> List[LayerSpec]:
    specs = []
    c_in = 1
    for c_out in channels:
        specs += [LayerSpec.conv(c_in, c_out), LayerSpec.batchnorm(c_out), LayerSpec.relu()]
        c_in = c_out
    return specs + [LayerSpec.flatten()]


def decoder_specs(latent_dim: int, grid_size: int, channels: Sequence[int] = ENCODER_CHANNELS) -> List[LayerSpec]:
    side = grid_size // 2 ** len(channels)
    top = channels[-1]
    specs = [LayerSpec.dense(latent_dim, top * side * side), LayerSpec.relu(), LayerSpec.reshape(top, side, side)]
    widths = list(reversed(channels))
    for c_in, c_out in zip(widths, widths[1:]):
        specs += [LayerSpec.tconv(c_in, c_out), LayerSpec.batchnorm(c_out), LayerSpec.relu()]
    return specs + [LayerSpec.tconv(widths[-1], 1), LayerSpec.tanh()]


class VaeModel(nn.Module):
    """Encoder trunk, mean head, optional log-variance head and masked tanh decoder"""

    def __init__(
        self,
        latent_dim: int = 16,
        grid_size: int = 32,
        E: int = 16,
        mask: Optional[np.ndarray] = None,
        c_norm: float = 1.0,
        kl_formula: Union[KLFormula, str] = KLFormula.STANDARD,
        variational: bool = True,
        channels: Sequence[int] = ENCODER_CHANNELS,
        seed: int = 0,
    ):
        super().__init__()
        if not 1 <= latent_dim < E * (E - 3) / 2:
            raise ModelConfigError(f"latent_dim must satisfy 1 <= k < E(E-3)/2 = {E * (E - 3) / 2}, got {latent_dim}")
        if grid_size % 2 ** len(channels) or grid_size < 2 ** len(channels):
            raise ModelConfigError(f"grid_size {grid_size} must be a multiple of {2 ** len(channels)}")

        self.latent_dim = latent_dim
        self.grid_size = grid_size
        self.E = E
        self.c_norm = float(c_norm)
        self.kl_formula = KLFormula(kl_formula)
        self.variational = variational
        self.channels = tuple(channels)
        self.seed = seed

        self.encoder = initialize(Network(encoder_specs(channels), (1, grid_size, grid_size)), seed)
        features = self.encoder.output_shape[0]
        self.mu_head = initialize(Network([LayerSpec.dense(features, latent_dim)], (features,)), seed + 1)
        self.logvar_head = (
            initialize(Network([LayerSpec.dense(features, latent_dim)], (features,)), seed + 2)
            if variational
            else None
        )
        self.decoder = initialize(Network(decoder_specs(latent_dim, grid_size, channels), (latent_dim,)), seed + 3)

        mask = np.ones((grid_size, grid_size)) if mask is None else np.asarray(mask)
        if mask.shape != (grid_size, grid_size):
            raise DimensionMismatchError("mask pixels", grid_size * grid_size, mask.size)
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float32).reshape(1, 1, grid_size, grid_size))

    def encode_tensors(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        features = self.encoder(x)
        logvar = self.logvar_head(features) if self.logvar_head is not None else None
        return self.mu_head(features), logvar

    def decode_tensors(self, h: torch.Tensor) -> torch.Tensor:
        return self.decoder(h) * self.mask

    def forward(
        self, x: torch.Tensor, noise: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        """Reconstruction of x with h = mu + sigma * noise (h = mu without noise or log-variance head)"""
        mu, logvar = self.encode_tensors(x)
        h = mu
        if logvar is not None and noise is not None:
            h = mu + torch.exp(0.5 * logvar) * noise
        return self.decode_tensors(h), mu, logvar

    def manifest(self) -> Dict[str, Any]:
        return {
            "latent_dim": self.latent_dim,
            "grid_size": self.grid_size,
            "E": self.E,
            "c_norm": self.c_norm,
            "kl_formula": self.kl_formula.value,
            "variational": self.variational,
            "channels": list(self.channels),
            "init_seed": self.seed,
            "init": "he-uniform before relu, glorot-uniform otherwise, zero bias",
            "encoder": self.encoder.describe(),
            "decoder": self.decoder.describe(),
        }


def _image_batch(model: VaeModel, images: np.ndarray) -> Tuple[torch.Tensor, bool]:
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    batch = images[None] if single else images
    g = model.grid_size
    if batch.ndim != 3 or batch.shape[1:] != (g, g):
        raise DimensionMismatchError("image pixels", g * g, int(np.prod(images.shape[-2:])))
    return torch.from_numpy(np.ascontiguousarray(batch)).unsqueeze(1), single


def encode(model: VaeModel, images: np.ndarray) -> LatentDistribution:
    """Encoder distribution of one image (H, W) or a batch (B, H, W); rows keep batch order"""
    x, single = _image_batch(model, images)
    model.eval()
    with torch.no_grad():
        mu, logvar = model.encode_tensors(x)
    mu = mu.double().numpy()
    sigma = None if logvar is None else torch.exp(0.5 * logvar.double()).numpy()
    if single:
        mu = mu[0]
        sigma = None if sigma is None else sigma[0]
    return LatentDistribution(mu=mu, sigma=sigma)


def reparameterize(dist: LatentDistribution, seed: int) -> np.ndarray:
    """h = mu + sigma * z with z standard normal drawn from seed"""
    if dist.sigma is None:
        return dist.mu.copy()
    z = sample_gaussian(dist.mu.shape, seed, torch.float64).numpy()
    return dist.mu + dist.sigma * z


def decode(model: VaeModel, h: np.ndarray) -> np.ndarray:
    """Decoded image(s) in (-1, 1), zero outside the domain mask"""
    h = np.asarray(h, dtype=np.float32)
    single = h.ndim == 1
    batch = h[None] if single else h
    if batch.shape[-1] != model.latent_dim:
        raise DimensionMismatchError("latent vector", model.latent_dim, batch.shape[-1])
    model.eval()
    with torch.no_grad():
        out = model.decode_tensors(torch.from_numpy(np.ascontiguousarray(batch)))[:, 0].numpy()
    return out[0] if single else out


def kl_loss(
    dist: LatentDistribution, formula: Union[KLFormula, str] = KLFormula.STANDARD
) -> Union[float, np.ndarray]:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent components; one value per row for batches"""
    if dist.sigma is None:
        raise ValueError("deterministic encoder has no sigma")
    if np.any(dist.sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    mu, sigma = dist.mu, dist.sigma
    if KLFormula(formula) is KLFormula.STANDARD:
        terms = mu**2 + sigma**2 - np.log(sigma**2) - 1.0
    else:
        terms = mu**2 + sigma**2 - np.log(sigma) - 1.0
    total = 0.5 * terms.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor, formula: KLFormula = KLFormula.STANDARD) -> torch.Tensor:
    """Per-sample KL from mean and log-variance tensors"""
    log_term = logvar if formula is KLFormula.STANDARD else 0.5 * logvar
    return 0.5 * (mu.pow(2) + logvar.exp() - log_term - 1.0).sum(dim=-1)


def vae_loss(
    model: VaeModel, x: torch.Tensor, noise: Optional[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(mean total loss, mean squared reconstruction error per image, mean KL)"""
    recon, mu, logvar = model(x, noise)
    reconstruction = (recon - x).pow(2).flatten(1).sum(dim=1)
    kl = kl_divergence(mu, logvar, model.kl_formula) if logvar is not None else torch.zeros_like(reconstruction)
    return (reconstruction + kl).mean(), reconstruction.mean(), kl.mean()


@dataclass
class TrainingResult:
    model: nn.Module
    history: List[float]
    steps: int
    params: Optional[ParameterSet] = None


def train_stage1(
    model: VaeModel,
    images: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    index: Optional[np.ndarray] = None,
    tracker: Optional[RunTracker] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    params: Optional[ParameterSet] = None,
) -> TrainingResult:
    """Minimize the minibatch mean of ||decode(h) - x||^2 + KL over normalized images.

    Args:
        model: VAE to train in place
        images: (N, H, W) normalized images
        epochs: Number of passes
        batch_size: Minibatch size m
        lr: Adam learning rate
        seed: Seeds shuffling and reparameterization noise
        index: Optional sample -> image row map (noise replicates share one image)
        tracker: RunTracker receiving per-epoch losses
        checkpoint_dir: Where the last good state is written if training diverges
        params: Adam state to continue from (a restored checkpoint); a fresh one at lr otherwise

    Returns:
        TrainingResult with the per-epoch mean loss history
    """
    tracker = tracker or default_tracker
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)
    index = torch.arange(data.shape[0]) if index is None else torch.as_tensor(index, dtype=torch.long)
    loader = index_loader(len(index), batch_size, seed)
    noise_generator = torch.Generator().manual_seed(seed + 1)
    params = params or ParameterSet(model, lr=lr)
    if params.module is not model:
        raise ModelConfigError("optimizer state belongs to a different model")
    history: List[float] = []

    for epoch in range(epochs):
        last_good = copy.deepcopy(model.state_dict())
        model.train()
        total, count = 0.0, 0
        for (batch,) in loader:
            x = data[index[batch]]
            noise = None
            if model.variational:
                noise = torch.randn((x.shape[0], model.latent_dim), generator=noise_generator)
            loss, _, _ = vae_loss(model, x, noise)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                checkpoint = None
                if checkpoint_dir is not None:
                    checkpoint = str(save_vae(checkpoint_dir, model, {"diverged_epoch": epoch}))
                logger.error(f"VAE loss became non-finite at epoch {epoch}")
                raise TrainingDivergedError("vae", epoch, checkpoint)
            params.zero_grad()
            loss.backward()
            adam_step(params)
            total += float(loss) * x.shape[0]
            count += x.shape[0]
        history.append(total / max(count, 1))
        tracker.track_epoch("vae", epoch, history[-1])
        logger.info(f"VAE epoch {epoch + 1}/{epochs}: loss {history[-1]:.5f}")

    model.eval()
    return TrainingResult(model=model, history=history, steps=params.step_count, params=params)


def reconstruction_errors(model: VaeModel, images: np.ndarray) -> np.ndarray:
    """||decode(mu(x)) - x|| / ||x|| per image"""
    recon = decode(model, encode(model, images).mu)
    images = np.asarray(images, dtype=np.float64).reshape(recon.shape)
    diff = np.linalg.norm((recon - images).reshape(len(images), -1), axis=1)
    norm = np.linalg.norm(images.reshape(len(images), -1), axis=1)
    return diff / np.maximum(norm, np.finfo(float).tiny)


def gradient_check(model: VaeModel, images: np.ndarray, seed: int = 0, n_directions: int = 3) -> float:
    """Finite-difference check of the full training loss, fixed noise, float64"""
    net = copy.deepcopy(model).double()
    net.train()
    x, _ = _image_batch(model, images)
    x = x.double()
    noise = sample_gaussian((x.shape[0], model.latent_dim), seed, torch.float64) if model.variational else None
    names = [name for name, _ in net.named_parameters()]
    params = [p for _, p in net.named_parameters()]

    def loss_of(inp: torch.Tensor, *ps: torch.Tensor) -> torch.Tensor:
        recon, mu, logvar = torch.func.functional_call(net, dict(zip(names, ps)), (inp, noise))
        reconstruction = (recon - inp).pow(2).flatten(1).sum(dim=1)
        kl = kl_divergence(mu, logvar, net.kl_formula) if logvar is not None else 0.0
        return (reconstruction + kl).mean()

    return finite_difference_check(loss_of, [x, *params], n_directions=n_directions, seed=seed)


def model_hash(module: nn.Module) -> str:
    state = module.state_dict()
    return content_hash(*[t.detach().cpu().numpy() for t in state.values()], extra=",".join(state))


def save_vae(
    directory: Union[str, Path],
    model: VaeModel,
    extra: Optional[Dict[str, Any]] = None,
    params: Optional[ParameterSet] = None,
) -> Path:
    manifest = {**model.manifest(), **(extra or {}), "model_hash": model_hash(model)}
    return save_checkpoint(directory, model, manifest, name="vae", params=params)


def load_vae(directory: Union[str, Path]) -> Tuple[VaeModel, Dict[str, Any]]:
    manifest, state = load_checkpoint(directory, name="vae")
    model = VaeModel(
        latent_dim=manifest["latent_dim"],
        grid_size=manifest["grid_size"],
        E=manifest["E"],
        c_norm=manifest["c_norm"],
        kl_formula=manifest["kl_formula"],
        variational=manifest["variational"],
        channels=manifest["channels"],
        seed=manifest["init_seed"],
    )
    model.load_state_dict(state)
    model.eval()
    return model, manifest
