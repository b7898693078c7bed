"""
Property Verification
Fast numerical self-checks of the solver, linearization, networks, losses and baselines
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .artifacts import write_json
from .baseline_recon import TikhonovConfig, TVConfig, discrete_gradient, tikhonov, tv_iterations
from .diffkit import LayerSpec, Mode, Network, initialize, network_gradient_check, sample_gaussian
from .fem_forward import ForwardModel
from .geometry import build_disk_mesh
from .latent_regressor import RegressorModel
from .preprocess_filter import build_filter
from .sensitivity import as_matrix, assemble, numerical_rank
from .vae import LatentDistribution, VaeModel, gradient_check, kl_loss

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-4
SYMMETRY_TOL = 1e-8
JACOBIAN_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0


@dataclass
class VerificationReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "results": [asdict(r) for r in self.results]}

    def save(self, directory: Union[str, Path]) -> Path:
        return write_json(Path(directory) / "verification.json", self.to_dict())


def _relative_asymmetry(a: np.ndarray, b: np.ndarray) -> float:
    both = np.isfinite(a) & np.isfinite(b)
    scale = max(float(np.max(np.abs(a[both]), initial=0.0)), np.finfo(float).tiny)
    return float(np.max(np.abs(a[both] - b[both]), initial=0.0) / scale)


class PropertySuite:
    """Runs every property check on one small disk model; each check returns a CheckResult"""

    def __init__(self, electrodes: int = 16, target_elements: int = 400, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.mesh, self.layout = build_disk_mesh(1.0, target_elements, electrodes, 0.5)
        self.model = ForwardModel(self.mesh, self.layout)
        self.S = assemble(self.mesh, self.layout, model=self.model)

    @property
    def checks(self) -> List[Tuple[str, Callable[[], CheckResult]]]:
        return [
            ("rank_bound", self.rank_bound),
            ("reciprocity", self.reciprocity),
            ("rotation_invariance", self.rotation_invariance),
            ("amplitude_linearity", self.amplitude_linearity),
            ("jacobian_finite_differences", self.jacobian),
            ("layer_gradients", self.layer_gradients),
            ("vae_gradient", self.vae_gradient),
            ("regressor_gradient", self.regressor_gradient),
            ("kl_identities", self.kl_identities),
            ("kl_monte_carlo", self.kl_monte_carlo),
            ("tikhonov_optimality", self.tikhonov_optimality),
            ("tv_descent", self.tv_descent),
            ("filter_idempotence", self.filter_idempotence),
        ]

    def _random_gamma(self) -> np.ndarray:
        return np.exp(self.rng.uniform(-0.5, 0.5, self.mesh.n_elements))

    def rank_bound(self) -> CheckResult:
        E = self.layout.E
        rank = numerical_rank(self.S)
        bound = E * (E - 3) // 2
        ok = self.S.shape[0] == E * (E - 3) and rank <= bound
        return CheckResult("rank_bound", ok, rank, bound, f"rows={self.S.shape[0]}")

    def reciprocity(self) -> CheckResult:
        worst = 0.0
        for gamma in (np.ones(self.mesh.n_elements), self._random_gamma()):
            V = self.model.measure(gamma).pair_matrix()
            worst = max(worst, _relative_asymmetry(V, V.T))
        return CheckResult("reciprocity", worst < SYMMETRY_TOL, worst, SYMMETRY_TOL)

    def rotation_invariance(self) -> CheckResult:
        V = self.model.measure(np.ones(self.mesh.n_elements)).pair_matrix()
        shifted = np.roll(np.roll(V, -1, axis=0), -1, axis=1)
        worst = _relative_asymmetry(V, shifted)
        return CheckResult("rotation_invariance", worst < SYMMETRY_TOL, worst, SYMMETRY_TOL)

    def amplitude_linearity(self) -> CheckResult:
        gamma = self._random_gamma()
        one = self.model.measure(gamma, 1.0).values
        three = self.model.measure(gamma, 3.0).values
        error = float(np.linalg.norm(three - 3.0 * one) / np.linalg.norm(3.0 * one))
        return CheckResult("amplitude_linearity", error < SYMMETRY_TOL, error, SYMMETRY_TOL)

    def jacobian(self, n_elements: int = 10, eps: float = 1e-4) -> CheckResult:
        ones = np.ones(self.mesh.n_elements)
        worst = 0.0
        for m in self.rng.choice(self.mesh.n_elements, size=n_elements, replace=False):
            step = np.zeros_like(ones)
            step[m] = eps
            numeric = (self.model.measure(ones + step).values - self.model.measure(ones - step).values) / (2 * eps)
            column = self.S.entries[:, m]
            worst = max(worst, float(np.linalg.norm(column - numeric) / np.linalg.norm(numeric)))
        return CheckResult("jacobian_finite_differences", worst < JACOBIAN_TOL, worst, JACOBIAN_TOL)

    def layer_gradients(self) -> CheckResult:
        cases = {
            "dense": ([LayerSpec.dense(6, 4)], (6,)),
            "conv": ([LayerSpec.conv(2, 3)], (2, 8, 8)),
            "tconv": ([LayerSpec.tconv(3, 2)], (3, 4, 4)),
            "batchnorm1d": ([LayerSpec.batchnorm(5)], (5,)),
            "batchnorm2d": ([LayerSpec.batchnorm(3)], (3, 4, 4)),
            "relu": ([LayerSpec.dense(6, 6), LayerSpec.relu()], (6,)),
            "tanh": ([LayerSpec.tanh()], (6,)),
            "reshape": ([LayerSpec.dense(8, 8), LayerSpec.reshape(2, 2, 2), LayerSpec.flatten()], (8,)),
        }
        errors = {}
        for index, (name, (specs, shape)) in enumerate(cases.items()):
            network = initialize(Network(specs, shape), self.seed + index)
            x = sample_gaussian((4, *shape), self.seed + index, torch.float64)
            errors[name] = network_gradient_check(network, x, Mode.TRAIN, seed=self.seed)
        worst_name = max(errors, key=errors.get)
        worst = errors[worst_name]
        return CheckResult("layer_gradients", worst < GRADIENT_TOL, worst, GRADIENT_TOL, f"worst layer {worst_name}")

    def vae_gradient(self) -> CheckResult:
        vae = VaeModel(latent_dim=2, grid_size=16, E=self.layout.E, channels=(2, 3, 4, 5), seed=self.seed)
        images = np.tanh(sample_gaussian((4, 16, 16), self.seed, torch.float64).numpy())
        error = gradient_check(vae, images, seed=self.seed)
        return CheckResult("vae_gradient", error < GRADIENT_TOL, error, GRADIENT_TOL)

    def regressor_gradient(self) -> CheckResult:
        rows = self.S.shape[0]
        regressor = RegressorModel(rows, 2, widths=(8, 8), seed=self.seed)
        x = sample_gaussian((6, rows), self.seed, torch.float64)
        error = network_gradient_check(regressor, x, Mode.TRAIN, seed=self.seed)
        return CheckResult("regressor_gradient", error < GRADIENT_TOL, error, GRADIENT_TOL)

    def kl_identities(self) -> CheckResult:
        k = 16
        zero = kl_loss(LatentDistribution(np.zeros(k), np.ones(k)))
        unit = np.zeros(k)
        unit[0] = 1.0
        half = kl_loss(LatentDistribution(unit, np.ones(k)))
        error = max(abs(zero), abs(half - 0.5))
        return CheckResult("kl_identities", error < 1e-12, error, 1e-12, f"kl(0,1)={zero}, kl(e1,1)={half}")

    def kl_monte_carlo(self, k: int = 4, n_samples: int = 1_000_000) -> CheckResult:
        mu = self.rng.normal(size=k)
        sigma = self.rng.uniform(0.5, 1.5, size=k)
        closed = kl_loss(LatentDistribution(mu, sigma))
        q = torch.distributions.Normal(torch.from_numpy(mu), torch.from_numpy(sigma))
        p = torch.distributions.Normal(torch.zeros(k, dtype=torch.float64), torch.ones(k, dtype=torch.float64))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            h = q.sample((n_samples,))
        estimate = float((q.log_prob(h) - p.log_prob(h)).sum(dim=1).mean())
        error = abs(estimate - closed) / closed
        return CheckResult("kl_monte_carlo", error < 0.01, error, 0.01, f"closed={closed:.5f}, mc={estimate:.5f}")

    def tikhonov_optimality(self) -> CheckResult:
        S = as_matrix(self.S)
        b = S @ self.rng.normal(size=S.shape[1]) + 1e-3 * self.rng.normal(size=S.shape[0])
        lam = 1e-4 * float(np.linalg.norm(S, 2)) ** 2
        x = tikhonov(S, b, TikhonovConfig(lam=lam))
        rhs = S.T @ b
        error = float(np.linalg.norm(S.T @ (S @ x) + lam * x - rhs) / np.linalg.norm(rhs))
        return CheckResult("tikhonov_optimality", error < 1e-6, error, 1e-6)

    def tv_descent(self, n_frames: int = 5, iterations: int = 8) -> CheckResult:
        S = as_matrix(self.S)
        D = discrete_gradient(self.mesh)
        lam = 1e-3 * float(np.linalg.norm(S, 2)) ** 2
        worst = 0.0
        for _ in range(n_frames):
            b = S @ self.rng.normal(size=S.shape[1])
            history = np.asarray(tv_iterations(S, D, b, lam, TVConfig(lam=lam), iterations).objective_history)
            increase = np.max(np.diff(history), initial=0.0) / history[0]
            worst = max(worst, float(increase))
        tol = 1e-9
        return CheckResult("tv_descent", worst <= tol, worst, tol, "largest relative objective increase")

    def filter_idempotence(self) -> CheckResult:
        projection = build_filter(self.S, self.mesh, lambda_f=0.0, allow_projection=True).operator
        error = float(np.max(np.abs(projection @ projection - projection)))
        return CheckResult("filter_idempotence", error < SYMMETRY_TOL, error, SYMMETRY_TOL)


def run_verification(
    electrodes: int = 16, target_elements: int = 400, seed: int = 0, only: Optional[List[str]] = None
) -> VerificationReport:
    """Run the property suite; failures are reported, never raised"""
    suite = PropertySuite(electrodes, target_elements, seed)
    report = VerificationReport()
    for name, check in suite.checks:
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            result = check()
        except Exception as e:
            logger.error(f"Check {name} raised: {e}")
            result = CheckResult(name, False, float("nan"), float("nan"), f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        status = "PASS" if result.passed else "FAIL"
        logger.info(f"[{status}] {name}: {result.value:.3e} (threshold {result.threshold:.1e}) {result.detail}")
        report.results.append(result)
    return report
