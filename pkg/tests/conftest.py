"""
Shared fixtures: a small disk model, a tiny phantom dataset and a briefly trained pipeline
"""

import numpy as np
import pytest

SMALL_E = 8
SMALL_ELEMENTS = 200
SMALL_GRID = 16


@pytest.fixture(scope="session")
def small_mesh():
    """8-electrode disk mesh of roughly 200 elements"""
    from src.geometry import build_disk_mesh

    return build_disk_mesh(1.0, SMALL_ELEMENTS, SMALL_E, 0.5)


@pytest.fixture(scope="session")
def small_forward(small_mesh):
    from src.fem_forward import ForwardModel

    mesh, layout = small_mesh
    return ForwardModel(mesh, layout)


@pytest.fixture(scope="session")
def small_sensitivity(small_mesh, small_forward):
    from src.sensitivity import assemble

    mesh, layout = small_mesh
    return assemble(mesh, layout, model=small_forward)


@pytest.fixture(scope="session")
def small_filter(small_mesh, small_sensitivity):
    from src.preprocess_filter import build_filter

    mesh, _ = small_mesh
    return build_filter(small_sensitivity, mesh)


@pytest.fixture(scope="session")
def tiny_dataset(small_mesh, small_sensitivity, small_filter):
    """10 phantoms x 3 noise replicates on a 16 x 16 grid"""
    from src.phantom_data import build_dataset

    mesh, layout = small_mesh
    return build_dataset(
        mesh, layout, small_sensitivity, small_filter, n_base=10, n_noise=3, noise_level=0.05, seed=0, grid_size=16
    )


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, tiny_dataset):
    from src.phantom_data import save_dataset

    directory = tmp_path_factory.mktemp("dataset")
    save_dataset(directory, tiny_dataset)
    return directory


@pytest.fixture(scope="session")
def trained_artifacts(tmp_path_factory, tiny_dataset, dataset_dir):
    """Dataset, VAE and regressor directories forming a consistent provenance chain"""
    from src.latent_regressor import RegressorModel, build_targets, save_regressor, train_stage2
    from src.vae import VaeModel, model_hash, save_vae, train_stage1

    vae = VaeModel(
        latent_dim=2,
        grid_size=SMALL_GRID,
        E=SMALL_E,
        mask=tiny_dataset.grid.domain_mask,
        c_norm=tiny_dataset.c_norm,
        channels=(4, 4, 4, 4),
        seed=0,
    )
    pairs = tiny_dataset.pair_indices("train")
    train_stage1(vae, tiny_dataset.images, 2, 8, 1e-3, 0, index=tiny_dataset.base_of_pair(pairs))
    vae_dir = tmp_path_factory.mktemp("vae")
    save_vae(vae_dir, vae, {"dataset_hash": tiny_dataset.hash})

    training_set = build_targets(vae, tiny_dataset, "train")
    regressor = RegressorModel(tiny_dataset.frames.shape[1], 2, widths=(16, 16), seed=0)
    train_stage2(regressor, training_set, 2, 8, 1e-3, 0)
    regressor_dir = tmp_path_factory.mktemp("regressor")
    save_regressor(regressor_dir, regressor, {"dataset_hash": tiny_dataset.hash, "vae_hash": model_hash(vae)})

    return {"dataset": dataset_dir, "vae": vae_dir, "regressor": regressor_dir}


@pytest.fixture(scope="session")
def small_pipeline(trained_artifacts):
    from src.pipeline import load_pipeline

    return load_pipeline(trained_artifacts["dataset"], trained_artifacts["vae"], trained_artifacts["regressor"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
