"""
Tests for the variational autoencoder
"""

import math

import numpy as np
import pytest
import torch

SMALL_E = 8
SMALL_GRID = 16


def make_vae(dataset, **kwargs):
    from src.vae import VaeModel

    options = dict(
        latent_dim=2,
        grid_size=SMALL_GRID,
        E=SMALL_E,
        mask=dataset.grid.domain_mask,
        c_norm=dataset.c_norm,
        channels=(4, 4, 4, 4),
        seed=0,
    )
    options.update(kwargs)
    return VaeModel(**options)


class TestVaeModel:
    """Construction constraints and encode/decode shapes"""

    def test_latent_dim_bounded_by_measurements(self, tiny_dataset):
        """k must stay below E(E-3)/2"""
        from src.errors import ModelConfigError

        with pytest.raises(ModelConfigError):
            make_vae(tiny_dataset, latent_dim=20)
        with pytest.raises(ModelConfigError):
            make_vae(tiny_dataset, latent_dim=0)
        assert make_vae(tiny_dataset, latent_dim=19).latent_dim == 19

    def test_grid_must_fit_the_encoder(self, tiny_dataset):
        from src.errors import ModelConfigError

        with pytest.raises(ModelConfigError):
            make_vae(tiny_dataset, grid_size=20, mask=None)

    def test_mask_shape_checked(self, tiny_dataset):
        from src.errors import DimensionMismatchError

        with pytest.raises(DimensionMismatchError):
            make_vae(tiny_dataset, mask=np.ones((8, 8)))

    def test_encode_shapes(self, tiny_dataset):
        from src.vae import encode

        vae = make_vae(tiny_dataset)
        batch = encode(vae, tiny_dataset.images[:3])
        assert batch.mu.shape == (3, 2) and batch.sigma.shape == (3, 2)
        assert np.all(batch.sigma > 0)
        single = encode(vae, tiny_dataset.images[0])
        assert single.mu.shape == (2,)
        np.testing.assert_allclose(single.mu, batch.mu[0], rtol=1e-5, atol=1e-6)

    def test_decode_is_bounded_and_masked(self, tiny_dataset, rng):
        """Decoded pixels lie in (-1, 1) and vanish outside the domain"""
        from src.vae import decode

        vae = make_vae(tiny_dataset)
        images = decode(vae, rng.normal(size=(4, 2)))
        assert images.shape == (4, SMALL_GRID, SMALL_GRID)
        assert np.all(np.abs(images) < 1.0)
        assert np.all(images[:, ~tiny_dataset.grid.domain_mask] == 0)
        assert decode(vae, np.zeros(2)).shape == (SMALL_GRID, SMALL_GRID)

    def test_wrong_sizes(self, tiny_dataset):
        from src.errors import DimensionMismatchError
        from src.vae import decode, encode

        vae = make_vae(tiny_dataset)
        with pytest.raises(DimensionMismatchError):
            encode(vae, np.zeros((8, 8)))
        with pytest.raises(DimensionMismatchError):
            decode(vae, np.zeros(3))


class TestLatentDistribution:
    def test_kl_zero_at_prior(self):
        from src.vae import LatentDistribution, kl_loss

        assert kl_loss(LatentDistribution(mu=np.zeros(4), sigma=np.ones(4))) == pytest.approx(0.0)
        assert kl_loss(LatentDistribution(mu=np.zeros(4), sigma=np.ones(4)), "half-log") == pytest.approx(0.0)

    def test_kl_values(self):
        """Standard form vs the half-log variant at sigma = e"""
        from src.vae import LatentDistribution, kl_loss

        dist = LatentDistribution(mu=np.array([1.0]), sigma=np.array([math.e]))
        assert kl_loss(dist) == pytest.approx(0.5 * (1.0 + math.e**2 - 2.0 - 1.0))
        assert kl_loss(dist, "half-log") == pytest.approx(0.5 * (1.0 + math.e**2 - 1.0 - 1.0))

    def test_kl_batch_rows(self, rng):
        from src.vae import LatentDistribution, kl_loss

        mu = rng.normal(size=(5, 3))
        sigma = rng.uniform(0.5, 2.0, size=(5, 3))
        batch = kl_loss(LatentDistribution(mu=mu, sigma=sigma))
        assert batch.shape == (5,)
        assert batch[2] == pytest.approx(kl_loss(LatentDistribution(mu=mu[2], sigma=sigma[2])))
        assert np.all(batch >= 0)

    @pytest.mark.parametrize("formula", ["standard", "half-log"])
    def test_torch_matches_numpy(self, rng, formula):
        """Training-time KL from log-variance equals the numpy form"""
        from src.vae import KLFormula, LatentDistribution, kl_divergence, kl_loss

        mu = rng.normal(size=(4, 3))
        sigma = rng.uniform(0.3, 1.8, size=(4, 3))
        logvar = torch.from_numpy(np.log(sigma**2))
        torch_kl = kl_divergence(torch.from_numpy(mu), logvar, KLFormula(formula)).numpy()
        np.testing.assert_allclose(torch_kl, kl_loss(LatentDistribution(mu=mu, sigma=sigma), formula), rtol=1e-12)

    def test_kl_rejects_bad_sigma(self):
        from src.vae import LatentDistribution, kl_loss

        with pytest.raises(ValueError):
            kl_loss(LatentDistribution(mu=np.zeros(2), sigma=np.array([1.0, 0.0])))
        with pytest.raises(ValueError):
            kl_loss(LatentDistribution(mu=np.zeros(2)))

    def test_sigma_shape_checked(self):
        from src.errors import DimensionMismatchError
        from src.vae import LatentDistribution

        with pytest.raises(DimensionMismatchError):
            LatentDistribution(mu=np.zeros(3), sigma=np.ones(2))

    def test_reparameterize(self):
        """Seeded draws around mu; deterministic encoders return mu"""
        from src.vae import LatentDistribution, reparameterize

        dist = LatentDistribution(mu=np.array([1.0, -2.0]), sigma=np.array([0.1, 0.2]))
        np.testing.assert_array_equal(reparameterize(dist, 3), reparameterize(dist, 3))
        assert not np.array_equal(reparameterize(dist, 3), reparameterize(dist, 4))
        draws = np.stack([reparameterize(dist, s) for s in range(400)])
        np.testing.assert_allclose(draws.mean(axis=0), dist.mu, atol=0.05)
        np.testing.assert_allclose(draws.std(axis=0), dist.sigma, rtol=0.2)
        plain = LatentDistribution(mu=np.array([1.0, -2.0]))
        np.testing.assert_array_equal(reparameterize(plain, 3), plain.mu)


class TestDeterministicAutoencoder:
    def test_no_sigma(self, tiny_dataset):
        from src.vae import encode, reparameterize

        vae = make_vae(tiny_dataset, variational=False)
        dist = encode(vae, tiny_dataset.images[:2])
        assert dist.sigma is None
        np.testing.assert_array_equal(reparameterize(dist, 0), dist.mu)


class TestTraining:
    """Stage-one training"""

    def test_history_and_steps(self, tiny_dataset):
        from src.analytics import RunTracker
        from src.vae import train_stage1

        vae = make_vae(tiny_dataset)
        result = train_stage1(vae, tiny_dataset.images, 2, 4, 1e-3, 0, tracker=RunTracker())
        assert len(result.history) == 2
        assert all(np.isfinite(result.history))
        assert result.steps == 2 * 2
        assert not vae.training

    def test_seeded_training_is_reproducible(self, tiny_dataset):
        from src.analytics import RunTracker
        from src.vae import model_hash, train_stage1

        runs = []
        for _ in range(2):
            vae = make_vae(tiny_dataset)
            result = train_stage1(vae, tiny_dataset.images, 1, 4, 1e-3, 5, tracker=RunTracker())
            runs.append((result.history, model_hash(vae)))
        assert runs[0] == runs[1]

    def test_loss_decreases(self, tiny_dataset):
        from src.analytics import RunTracker
        from src.vae import train_stage1

        vae = make_vae(tiny_dataset)
        result = train_stage1(vae, tiny_dataset.images, 15, 4, 3e-3, 0, tracker=RunTracker())
        assert result.history[-1] < result.history[0]

    def test_single_sample_batches_rejected(self, tiny_dataset):
        from src.errors import ModelConfigError
        from src.vae import train_stage1

        vae = make_vae(tiny_dataset)
        with pytest.raises(ModelConfigError):
            train_stage1(vae, tiny_dataset.images, 1, 1, 1e-3, 0)
        with pytest.raises(ModelConfigError):
            train_stage1(vae, tiny_dataset.images[:1], 1, 4, 1e-3, 0)

    def test_divergence_restores_last_good(self, tmp_path, tiny_dataset):
        """Non-finite loss raises with a checkpoint of the last good state"""
        from src.analytics import RunTracker
        from src.errors import TrainingDivergedError
        from src.vae import model_hash, train_stage1

        vae = make_vae(tiny_dataset)
        before = model_hash(vae)
        images = np.full_like(tiny_dataset.images, np.nan)
        with pytest.raises(TrainingDivergedError) as info:
            train_stage1(vae, images, 2, 4, 1e-3, 0, tracker=RunTracker(), checkpoint_dir=tmp_path)
        assert info.value.epoch == 0
        assert info.value.checkpoint is not None
        assert (tmp_path / "vae.json").exists()
        assert model_hash(vae) == before

    def test_reconstruction_errors(self, tiny_dataset):
        from src.vae import reconstruction_errors

        errors = reconstruction_errors(make_vae(tiny_dataset), tiny_dataset.images[:4])
        assert errors.shape == (4,)
        assert np.all(np.isfinite(errors)) and np.all(errors >= 0)

    def test_gradient_check(self, tiny_dataset):
        """Full training loss gradients agree with central differences"""
        from src.vae import gradient_check

        assert gradient_check(make_vae(tiny_dataset), tiny_dataset.images[:4]) < 1e-4


class TestVaePersistence:
    def test_round_trip(self, tmp_path, tiny_dataset):
        from src.vae import encode, load_vae, model_hash, save_vae

        vae = make_vae(tiny_dataset, kl_formula="half-log")
        save_vae(tmp_path, vae, {"dataset_hash": tiny_dataset.hash})
        loaded, manifest = load_vae(tmp_path)
        assert manifest["dataset_hash"] == tiny_dataset.hash
        assert manifest["model_hash"] == model_hash(vae) == model_hash(loaded)
        assert loaded.kl_formula.value == "half-log"
        images = tiny_dataset.images[:2]
        np.testing.assert_array_equal(encode(loaded, images).mu, encode(vae, images).mu)
