"""
Differentiable Toolkit
Layer specs compiled to torch networks, cached reverse-mode gradients, Adam, Gaussian sampling,
finite-difference gradient checks and checkpoints
"""

import copy
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset

from .artifacts import load_blob, read_json, save_blob, write_json
from .errors import ArtifactMismatchError, ModelConfigError, ShapeMismatchError, StaleCacheError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

# Running statistics follow running = 0.9 * running + 0.1 * batch
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class LayerKind(str, Enum):
    DENSE = "dense"
    CONV = "conv"
    TCONV = "tconv"
    RELU = "relu"
    TANH = "tanh"
    BATCHNORM = "batchnorm"
    FLATTEN = "flatten"
    RESHAPE = "reshape"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class LayerSpec:
    """One layer: n_in/n_out are features (dense) or channels (conv, tconv, batchnorm)"""

    kind: LayerKind
    n_in: int = 0
    n_out: int = 0
    kernel_size: int = 3
    stride: int = 2
    shape: Tuple[int, ...] = ()

    @classmethod
    def dense(cls, n_in: int, n_out: int) -> "LayerSpec":
        return cls(LayerKind.DENSE, n_in, n_out)

    @classmethod
    def conv(cls, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 2) -> "LayerSpec":
        return cls(LayerKind.CONV, c_in, c_out, kernel_size, stride)

    @classmethod
    def tconv(cls, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 2) -> "LayerSpec":
        return cls(LayerKind.TCONV, c_in, c_out, kernel_size, stride)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def tanh(cls) -> "LayerSpec":
        return cls(LayerKind.TANH)

    @classmethod
    def batchnorm(cls, features: int) -> "LayerSpec":
        return cls(LayerKind.BATCHNORM, features, features)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(LayerKind.FLATTEN)

    @classmethod
    def reshape(cls, *shape: int) -> "LayerSpec":
        return cls(LayerKind.RESHAPE, shape=tuple(shape))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerSpec":
        return cls(
            kind=LayerKind(data["kind"]),
            n_in=data["n_in"],
            n_out=data["n_out"],
            kernel_size=data["kernel_size"],
            stride=data["stride"],
            shape=tuple(data["shape"]),
        )


class Reshape(nn.Module):
    def __init__(self, shape: Tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], *self.shape)


def _build_layer(index: int, spec: LayerSpec, shape: Tuple[int, ...]) -> Tuple[nn.Module, Tuple[int, ...]]:
    """Torch module for spec plus its output shape (without batch axis)"""
    kind = spec.kind.value

    def fail(message: str):
        raise ShapeMismatchError(index, kind, f"{message}, input shape {shape}")

    if spec.kind is LayerKind.DENSE:
        if shape != (spec.n_in,):
            fail(f"expected ({spec.n_in},)")
        return nn.Linear(spec.n_in, spec.n_out), (spec.n_out,)

    if spec.kind in (LayerKind.CONV, LayerKind.TCONV):
        if len(shape) != 3 or shape[0] != spec.n_in:
            fail(f"expected ({spec.n_in}, H, W)")
        k, s, p = spec.kernel_size, spec.stride, spec.kernel_size // 2
        _, h, w = shape
        if spec.kind is LayerKind.CONV:
            if h % s or w % s:
                fail(f"spatial size not divisible by stride {s}")
            layer = nn.Conv2d(spec.n_in, spec.n_out, k, stride=s, padding=p)
            return layer, (spec.n_out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        # output_padding = stride - 1 makes the transposed conv mirror the conv exactly: H -> H * stride
        layer = nn.ConvTranspose2d(spec.n_in, spec.n_out, k, stride=s, padding=p, output_padding=s - 1)
        return layer, (spec.n_out, (h - 1) * s - 2 * p + k + s - 1, (w - 1) * s - 2 * p + k + s - 1)

    if spec.kind is LayerKind.BATCHNORM:
        if not shape or shape[0] != spec.n_in:
            fail(f"expected {spec.n_in} features")
        bn_cls = nn.BatchNorm1d if len(shape) == 1 else nn.BatchNorm2d
        if len(shape) not in (1, 3):
            fail("batchnorm needs (features,) or (channels, H, W)")
        return bn_cls(spec.n_in, eps=BN_EPS, momentum=1.0 - BN_MOMENTUM), shape

    if spec.kind is LayerKind.RELU:
        return nn.ReLU(), shape
    if spec.kind is LayerKind.TANH:
        return nn.Tanh(), shape
    if spec.kind is LayerKind.FLATTEN:
        return nn.Flatten(), (int(np.prod(shape)),)
    if spec.kind is LayerKind.RESHAPE:
        if int(np.prod(spec.shape)) != int(np.prod(shape)):
            fail(f"cannot reshape to {spec.shape}")
        return Reshape(spec.shape), tuple(spec.shape)
    fail("unknown layer kind")


class Network(nn.Module):
    """Sequential network compiled from LayerSpecs for a fixed per-sample input shape"""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int]):
        super().__init__()
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape: Tuple[int, ...] = tuple(input_shape)
        layers = []
        shape = self.input_shape
        for index, spec in enumerate(self.specs):
            layer, shape = _build_layer(index, spec, shape)
            layers.append(layer)
        self.output_shape: Tuple[int, ...] = shape
        self.layers = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            kind = self.specs[0].kind.value if self.specs else "input"
            got = tuple(x.shape[1:])
            raise ShapeMismatchError(0, kind, f"expected per-sample shape {self.input_shape}, got {got}")
        return self.layers(x)

    def describe(self) -> Dict[str, Any]:
        return {"input_shape": list(self.input_shape), "specs": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_description(cls, data: Dict[str, Any]) -> "Network":
        return cls([LayerSpec.from_dict(s) for s in data["specs"]], data["input_shape"])


def initialize(network: Network, seed: int) -> Network:
    """He-uniform weights before ReLU, Glorot-uniform otherwise, zero biases; seeded locally"""
    weighted = (LayerKind.DENSE, LayerKind.CONV, LayerKind.TCONV)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for index, (spec, layer) in enumerate(zip(network.specs, network.layers)):
            if spec.kind not in weighted:
                continue
            following = next(
                (s.kind for s in network.specs[index + 1 :] if s.kind in (LayerKind.RELU, LayerKind.TANH, *weighted)),
                None,
            )
            if following is LayerKind.RELU:
                nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            else:
                nn.init.xavier_uniform_(layer.weight)
            nn.init.zeros_(layer.bias)
    return network


def configure_determinism(threads: int = 1):
    """Deterministic kernels; threads=1 is the bit-reproducible mode"""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, threads))


@dataclass
class ForwardCache:
    """Autograd graph of one train-mode forward pass; usable by exactly one backward call"""

    network: nn.Module
    inputs: Tensor
    output: Tensor
    consumed: bool = False


@dataclass
class Gradients:
    params: Dict[str, Tensor]
    input: Optional[Tensor]


def forward(network: nn.Module, x: Tensor, mode: Mode = Mode.EVAL) -> Tuple[Tensor, Optional[ForwardCache]]:
    """Run network; train mode records a cache for backward and uses batch statistics"""
    mode = Mode(mode)
    network.train(mode is Mode.TRAIN)
    if mode is Mode.EVAL:
        with torch.no_grad():
            return network(x), None
    inputs = x.detach().clone().requires_grad_(True)
    output = network(inputs)
    return output, ForwardCache(network=network, inputs=inputs, output=output)


def backward(cache: Optional[ForwardCache], output_grad: Tensor) -> Gradients:
    """Parameter and input gradients of <output, output_grad>"""
    if cache is None or cache.consumed:
        raise StaleCacheError("backward needs the cache of an unconsumed train-mode forward pass")
    named = list(cache.network.named_parameters())
    targets = [cache.inputs] + [p for _, p in named]
    grads = torch.autograd.grad(cache.output, targets, grad_outputs=output_grad, allow_unused=True)
    cache.consumed = True
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    return Gradients(params={name: g for (name, _), g in zip(named, grads[1:])}, input=grads[0])


class ParameterSet:
    """Trainable tensors of a module plus their Adam state"""

    def __init__(
        self, module: nn.Module, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
    ):
        self.module = module
        self.optimizer = torch.optim.Adam(module.parameters(), lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    def named_moments(self) -> Dict[str, Dict[str, Tensor]]:
        """Adam first/second moments keyed by parameter name; parameters never stepped are absent"""
        moments = {}
        for name, param in self.module.named_parameters():
            state = self.optimizer.state.get(param)
            if state:
                moments[name] = {"exp_avg": state["exp_avg"], "exp_avg_sq": state["exp_avg_sq"]}
        return moments

    def load_moments(self, moments: Dict[str, Dict[str, Tensor]], step_count: int):
        named = dict(self.module.named_parameters())
        unknown = set(moments) - set(named)
        if unknown:
            raise ShapeMismatchError(f"optimizer state for unknown parameters: {sorted(unknown)}")
        for name, pair in moments.items():
            param = named[name]
            if tuple(pair["exp_avg"].shape) != tuple(param.shape):
                raise ShapeMismatchError(
                    f"optimizer state {name}: expected {tuple(param.shape)}, got {tuple(pair['exp_avg'].shape)}"
                )
            self.optimizer.state[param] = {
                "step": torch.tensor(float(step_count)),
                "exp_avg": pair["exp_avg"].to(param.dtype).clone(),
                "exp_avg_sq": pair["exp_avg_sq"].to(param.dtype).clone(),
            }
        self.step_count = int(step_count)

    def moments(self, name: str) -> Tuple[Optional[Tensor], Optional[Tensor]]:
        param = dict(self.module.named_parameters())[name]
        state = self.optimizer.state.get(param, {})
        return state.get("exp_avg"), state.get("exp_avg_sq")

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)


def adam_step(
    params: ParameterSet,
    grads: Optional[Dict[str, Tensor]] = None,
    lr: Optional[float] = None,
    betas: Optional[Tuple[float, float]] = None,
    eps: Optional[float] = None,
) -> ParameterSet:
    """One bias-corrected Adam update; grads default to the .grad already on each parameter"""
    if grads is not None:
        for name, param in params.module.named_parameters():
            g = grads.get(name)
            param.grad = torch.zeros_like(param) if g is None else g.detach().to(param.dtype).clone()
    for group in params.optimizer.param_groups:
        if lr is not None:
            group["lr"] = lr
        if betas is not None:
            group["betas"] = betas
        if eps is not None:
            group["eps"] = eps
    params.optimizer.step()
    params.step_count += 1
    return params


def sample_gaussian(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """I.i.d. standard normal tensor, reproducible per seed"""
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


def index_loader(n: int, batch_size: int, seed: int) -> DataLoader:
    """Seeded shuffled minibatches of sample indices; a trailing batch smaller than batch_size is dropped.

    Batch normalization needs two samples per minibatch, so batch_size and n must both be at least 2.
    """
    if batch_size < 2:
        raise ModelConfigError(f"batch_size must be >= 2 for batch-normalized training, got {batch_size}")
    if n < 2:
        raise ModelConfigError(f"need at least 2 training samples, got {n}")
    return DataLoader(
        TensorDataset(torch.arange(n)),
        batch_size=batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(int(seed)),
        drop_last=n > batch_size,
    )


def finite_difference_check(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], n_directions: int = 3, eps: float = 1e-6, seed: int = 0
) -> float:
    """Worst relative error between autograd directional derivatives and central differences.

    fn maps the inputs to a scalar; everything is evaluated in float64.
    """
    inputs = [t.detach().to(torch.float64).requires_grad_(True) for t in inputs]
    value = fn(*inputs)
    grads = torch.autograd.grad(value, inputs, allow_unused=True)
    generator = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_directions):
        directions = [torch.randn(t.shape, generator=generator, dtype=torch.float64) for t in inputs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, directions) if g is not None)
        with torch.no_grad():
            plus = float(fn(*[t + eps * d for t, d in zip(inputs, directions)]))
            minus = float(fn(*[t - eps * d for t, d in zip(inputs, directions)]))
        numeric = (plus - minus) / (2.0 * eps)
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, error)
    return worst


def network_gradient_check(
    network: nn.Module, x: Tensor, mode: Mode = Mode.TRAIN, seed: int = 0, n_directions: int = 3
) -> float:
    """Finite-difference check of a network's input and parameter gradients in float64"""
    net = copy.deepcopy(network).double()
    net.train(Mode(mode) is Mode.TRAIN)
    names = [name for name, _ in net.named_parameters()]
    params = [p for _, p in net.named_parameters()]
    x64 = x.detach().to(torch.float64)
    with torch.no_grad():
        weights = sample_gaussian(tuple(net(x64).shape), seed, torch.float64)

    def scalarized(inp: Tensor, *ps: Tensor) -> Tensor:
        out = torch.func.functional_call(net, dict(zip(names, ps)), (inp,))
        return (out * weights).sum()

    return finite_difference_check(scalarized, [x64, *params], n_directions=n_directions, seed=seed)


def save_checkpoint(
    directory: Union[str, Path],
    module: nn.Module,
    manifest: Dict[str, Any],
    name: str = "model",
    params: Optional[ParameterSet] = None,
) -> Path:
    """JSON manifest plus one little-endian blob per tensor (float32, or uint32 for counters).

    With params, the Adam moments, step count and hyperparameters are written too so training can resume.
    """
    directory = Path(directory)
    tensors = {}
    for key, tensor in module.state_dict().items():
        kind = "f4" if tensor.is_floating_point() else "u4"
        tensors[key] = save_blob(directory / f"{name}.{key}.{kind}", tensor.detach().cpu().numpy(), kind)
    manifest = {**manifest, "tensors": tensors}
    if params is not None:
        group = params.optimizer.param_groups[0]
        moments = {}
        for key, pair in params.named_moments().items():
            moments[key] = {
                slot: save_blob(directory / f"{name}.adam.{key}.{slot}.f4", value.detach().cpu().numpy(), "f4")
                for slot, value in pair.items()
            }
        manifest["optimizer"] = {
            "lr": group["lr"],
            "betas": list(group["betas"]),
            "eps": group["eps"],
            "step_count": params.step_count,
            "moments": moments,
        }
    path = write_json(directory / f"{name}.json", manifest)
    logger.info(f"Saved checkpoint {path}")
    return path


def load_checkpoint(directory: Union[str, Path], name: str = "model") -> Tuple[Dict[str, Any], Dict[str, Tensor]]:
    """Manifest and state dict written by save_checkpoint"""
    directory = Path(directory)
    manifest = read_json(directory / f"{name}.json")
    state = {}
    for key, descriptor in manifest["tensors"].items():
        array = load_blob(directory, descriptor)
        state[key] = torch.from_numpy(array.astype(np.int64) if descriptor["kind"] == "u4" else array.copy())
    return manifest, state


def restore_optimizer(directory: Union[str, Path], module: nn.Module, name: str = "model") -> ParameterSet:
    """ParameterSet over module carrying the Adam state saved beside its checkpoint"""
    directory = Path(directory)
    manifest = read_json(directory / f"{name}.json")
    saved = manifest.get("optimizer")
    if saved is None:
        raise ArtifactMismatchError(f"checkpoint {directory / name} has no optimizer state", manifest.get("model_hash"))
    params = ParameterSet(module, lr=saved["lr"], betas=tuple(saved["betas"]), eps=saved["eps"])
    moments = {
        key: {slot: torch.from_numpy(load_blob(directory, descriptor).copy()) for slot, descriptor in slots.items()}
        for key, slots in saved["moments"].items()
    }
    params.load_moments(moments, saved["step_count"])
    logger.info(f"Restored optimizer state at step {params.step_count} from {directory}")
    return params


def count_parameters(module: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in module.parameters())
