"""
Tests for the Tikhonov and total-variation baselines
"""

import numpy as np
import pytest


@pytest.fixture
def noisy_problem(small_sensitivity, rng):
    """Linearized data of a smooth blob plus 5% noise"""
    from src.sensitivity import as_matrix

    S = as_matrix(small_sensitivity)
    x = np.zeros(S.shape[1])
    x[: S.shape[1] // 3] = -0.5
    clean = S @ x
    noise = rng.normal(size=clean.shape)
    b = clean + 0.05 * np.sqrt(np.mean(clean**2)) * noise
    return S, b


def tv_objective_of(S, mesh, b, x, lam, epsilon=1e-4):
    from src.baseline_recon import discrete_gradient, tv_objective

    return tv_objective(S, discrete_gradient(mesh), b, x, lam, epsilon)


class TestTikhonov:
    """Quadratic regularization with the discrepancy principle"""

    def test_normal_equations(self, noisy_problem):
        """Solution satisfies (S^T S + lam I) x = S^T b"""
        from src.baseline_recon import TikhonovConfig, tikhonov

        S, b = noisy_problem
        lam = 1e-3 * np.linalg.norm(S, 2) ** 2
        x = tikhonov(S, b, TikhonovConfig(lam=lam))
        rhs = S.T @ b
        assert np.linalg.norm(S.T @ (S @ x) + lam * x - rhs) / np.linalg.norm(rhs) < 1e-8

    def test_discrepancy_lambda(self, noisy_problem):
        """Selected lambda puts the residual at noise_level * ||b||"""
        from src.baseline_recon import TikhonovSolver, discrepancy_target

        S, b = noisy_problem
        solver = TikhonovSolver(S)
        target = discrepancy_target(b, 0.05)
        lam = solver.discrepancy_lambda(b, target)
        assert solver.residual_norm(b, lam) == pytest.approx(target, rel=1e-3)
        x = solver.solve(b, lam)
        assert np.linalg.norm(b - S @ x) == pytest.approx(target, rel=1e-3)

    def test_residual_grows_with_lambda(self, noisy_problem):
        from src.baseline_recon import TikhonovSolver

        S, b = noisy_problem
        solver = TikhonovSolver(S)
        scale = np.linalg.norm(S, 2) ** 2
        residuals = [solver.residual_norm(b, scale * f) for f in (1e-8, 1e-4, 1e-1, 10.0)]
        assert all(np.diff(residuals) > 0)

    def test_zero_frame(self, small_sensitivity):
        """Zero data gives the zero image"""
        from src.baseline_recon import tikhonov

        x = tikhonov(small_sensitivity, np.zeros(small_sensitivity.shape[0]))
        np.testing.assert_array_equal(x, 0.0)

    def test_invalid_lambda(self):
        from src.baseline_recon import TikhonovConfig

        with pytest.raises(ValueError):
            TikhonovConfig(lam=-1.0)

    def test_frame_length_checked(self, small_sensitivity):
        from src.baseline_recon import TikhonovConfig, tikhonov
        from src.errors import DimensionMismatchError

        with pytest.raises(DimensionMismatchError):
            tikhonov(small_sensitivity, np.zeros(5), TikhonovConfig(lam=1.0))


class TestTotalVariation:
    """Lagged-diffusivity TV"""

    def test_discrete_gradient(self, small_mesh):
        """One row per interior edge; constants have zero gradient"""
        from src.baseline_recon import discrete_gradient

        mesh, _ = small_mesh
        D = discrete_gradient(mesh)
        assert D.shape == (len(mesh.element_adjacency), mesh.n_elements)
        np.testing.assert_allclose(D @ np.ones(mesh.n_elements), 0.0)

    def test_objective_non_increasing(self, noisy_problem, small_mesh):
        """Each majorize-minimize step does not raise the objective"""
        from src.baseline_recon import TVConfig, discrete_gradient, tv_iterations

        S, b = noisy_problem
        mesh, _ = small_mesh
        lam = 1e-3 * np.linalg.norm(S, 2) ** 2
        result = tv_iterations(S, discrete_gradient(mesh), b, lam, TVConfig(lam=lam), 10)
        history = np.asarray(result.objective_history)
        assert np.all(np.diff(history) <= 1e-9 * history[0])
        assert result.iterations <= 10

    def test_fixed_lambda(self, noisy_problem, small_mesh):
        """A fixed lambda is used as given and the best iterate is returned"""
        from src.baseline_recon import TVConfig, total_variation

        S, b = noisy_problem
        mesh, _ = small_mesh
        lam = 1e-2 * np.linalg.norm(S, 2) ** 2
        result = total_variation(S, b, mesh, TVConfig(lam=lam, max_iters=20))
        assert result.lam == lam
        assert result.gamma_dot.shape == (mesh.n_elements,)
        assert np.all(np.isfinite(result.gamma_dot))
        best = tv_objective_of(S, mesh, b, result.gamma_dot, lam)
        assert best == pytest.approx(min(result.objective_history), rel=1e-12)

    def test_discrepancy_lambda(self, noisy_problem, small_mesh):
        """Discrepancy-selected lambda is positive and recorded"""
        from src.baseline_recon import TVConfig, total_variation

        S, b = noisy_problem
        mesh, _ = small_mesh
        result = total_variation(S, b, mesh, TVConfig(max_iters=10, noise_level=0.05))
        assert result.lam > 0
        assert np.all(np.isfinite(result.gamma_dot))

    def test_non_convergence_flag(self, noisy_problem, small_mesh):
        """Hitting max_iters without meeting the tolerance reports converged=False"""
        from src.baseline_recon import TVConfig, total_variation

        S, b = noisy_problem
        mesh, _ = small_mesh
        lam = 1e-2 * np.linalg.norm(S, 2) ** 2
        result = total_variation(S, b, mesh, TVConfig(lam=lam, max_iters=1, conv_tol=1e-12))
        assert not result.converged
        assert result.iterations == 1

    def test_lower_total_variation_than_tikhonov(self, small_sensitivity, small_mesh, rng):
        """On a piecewise-constant phantom, at the same discrepancy target, TV yields the flatter image"""
        from src.baseline_recon import TikhonovConfig, TVConfig, discrete_gradient, tikhonov, total_variation
        from src.phantom_data import render, sample_phantom
        from src.sensitivity import as_matrix

        mesh, _ = small_mesh
        S = as_matrix(small_sensitivity)
        clean = S @ render(sample_phantom("normal", 3, ventilation_phase=1.0), mesh)
        b = clean + 0.05 * np.sqrt(np.mean(clean**2)) * rng.normal(size=clean.shape)
        x_tik = tikhonov(S, b, TikhonovConfig(noise_level=0.05))
        x_tv = total_variation(S, b, mesh, TVConfig(noise_level=0.05)).gamma_dot

        D = discrete_gradient(mesh)
        assert np.abs(D @ x_tv).sum() < np.abs(D @ x_tik).sum()
        target = 0.05 * np.linalg.norm(b)
        assert np.linalg.norm(b - S @ x_tik) == pytest.approx(target, rel=1e-3)
        assert np.linalg.norm(b - S @ x_tv) == pytest.approx(target, rel=0.5)

    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"max_iters": 0}, {"lam": -1.0}])
    def test_invalid_config(self, kwargs):
        from src.baseline_recon import TVConfig

        with pytest.raises(ValueError):
            TVConfig(**kwargs)
