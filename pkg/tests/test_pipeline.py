"""
Tests for the reconstruction pipeline, metrics, comparison experiment and manifold probes
"""

import shutil

import numpy as np
import pytest


@pytest.fixture(scope="module")
def pipeline(small_pipeline):
    return small_pipeline[0]


@pytest.fixture(scope="module")
def dataset(small_pipeline):
    return small_pipeline[1]


@pytest.mark.integration
class TestReconstruction:
    """f(V) = c_norm * decode(predict(filter(V)))"""

    def test_image_shape_and_bound(self, pipeline, dataset):
        from src.pipeline import reconstruct

        image = reconstruct(pipeline, dataset.frames[0])
        assert image.shape == (16, 16)
        assert np.all(np.abs(image) <= pipeline.c_norm)
        assert np.all(image[~dataset.grid.domain_mask] == 0)

    def test_steps(self, pipeline, dataset):
        """Intermediate stages chain into the final image"""
        from src.pipeline import reconstruct_steps

        steps = reconstruct_steps(pipeline, dataset.frames[1])
        np.testing.assert_allclose(steps["filtered"], pipeline.boundary_filter.apply(dataset.frames[1]))
        assert steps["latent"].shape == (2,)
        np.testing.assert_allclose(steps["image"], steps["normalized"] * pipeline.c_norm)

    def test_batch_matches_single(self, pipeline, dataset):
        from src.pipeline import reconstruct, reconstruct_batch

        batch = reconstruct_batch(pipeline, dataset.frames[:3])
        assert batch.shape == (3, 16, 16)
        for frame, image in zip(dataset.frames[:3], batch):
            np.testing.assert_allclose(reconstruct(pipeline, frame), image, rtol=1e-5, atol=1e-6)

    def test_accepts_measurement_frame(self, pipeline, dataset):
        from src.fem_forward import MeasurementFrame
        from src.pipeline import reconstruct

        frame = MeasurementFrame(values=dataset.frames[2].astype(np.float64), E=8)
        np.testing.assert_array_equal(reconstruct(pipeline, frame), reconstruct(pipeline, dataset.frames[2]))

    def test_wrong_frame_length(self, pipeline):
        from src.errors import DimensionMismatchError
        from src.pipeline import reconstruct, reconstruct_batch

        with pytest.raises(DimensionMismatchError):
            reconstruct(pipeline, np.zeros(7))
        with pytest.raises(DimensionMismatchError):
            reconstruct_batch(pipeline, np.zeros((2, 7)))

    def test_hashes_recorded(self, pipeline, dataset):
        assert pipeline.hashes["dataset"] == dataset.hash
        assert set(pipeline.hashes) == {"dataset", "vae", "regressor"}


@pytest.mark.integration
class TestProvenance:
    """Dataset -> VAE -> regressor chain checked at load time"""

    def test_regressor_from_other_vae(self, tmp_path, trained_artifacts):
        from src.artifacts import read_json, write_json
        from src.errors import ArtifactMismatchError
        from src.pipeline import load_pipeline

        regressor_dir = tmp_path / "regressor"
        shutil.copytree(trained_artifacts["regressor"], regressor_dir)
        manifest = read_json(regressor_dir / "regressor.json")
        manifest["vae_hash"] = "f" * 16
        write_json(regressor_dir / "regressor.json", manifest)
        with pytest.raises(ArtifactMismatchError):
            load_pipeline(trained_artifacts["dataset"], trained_artifacts["vae"], regressor_dir)

    def test_vae_from_other_dataset(self, tmp_path, trained_artifacts):
        from src.artifacts import read_json, write_json
        from src.errors import ArtifactMismatchError
        from src.pipeline import load_pipeline

        vae_dir = tmp_path / "vae"
        shutil.copytree(trained_artifacts["vae"], vae_dir)
        manifest = read_json(vae_dir / "vae.json")
        manifest["dataset_hash"] = "0" * 16
        write_json(vae_dir / "vae.json", manifest)
        with pytest.raises(ArtifactMismatchError):
            load_pipeline(trained_artifacts["dataset"], vae_dir, trained_artifacts["regressor"])

    def test_latent_dimensions_must_agree(self, pipeline, dataset):
        from src.errors import ArtifactMismatchError
        from src.latent_regressor import RegressorModel
        from src.pipeline import ReconPipeline

        with pytest.raises(ArtifactMismatchError):
            ReconPipeline(
                boundary_filter=dataset.boundary_filter,
                regressor=RegressorModel(dataset.boundary_filter.size, 3, widths=(8,)),
                vae=pipeline.vae,
                c_norm=dataset.c_norm,
            )


class TestMetrics:
    def test_relative_l2(self):
        from src.pipeline import relative_l2

        truth = np.array([[3.0, 4.0]])
        assert relative_l2(truth, truth) == 0.0
        assert relative_l2(np.zeros((1, 2)), truth) == pytest.approx(1.0)
        assert relative_l2(truth, np.zeros((1, 2))) == pytest.approx(5.0)

    def test_support_threshold(self):
        from src.pipeline import support

        image = np.array([[-1.0, -0.6, -0.4, 0.0]])
        np.testing.assert_array_equal(support(image), [[True, True, False, False]])
        assert not support(np.zeros((2, 2))).any()

    def test_dice(self):
        from src.pipeline import dice

        a = np.array([[-1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, -1.0], [0.0, 0.0]])
        assert dice(a, a) == 1.0
        assert dice(a, b) == 0.0
        assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0

    def test_component_count(self):
        """Two separated lungs give two components, touching ones give one"""
        from src.pipeline import component_count

        image = np.zeros((8, 8))
        image[2:6, 1:3] = -1.0
        image[2:6, 5:7] = -1.0
        assert component_count(image) == 2
        image[3, 3:5] = -1.0
        assert component_count(image) == 1
        assert component_count(np.zeros((4, 4))) == 0


@pytest.mark.integration
class TestComparison:
    """Held-out phantoms reconstructed by all methods"""

    @pytest.fixture(scope="class")
    def report(self, small_pipeline):
        from src.pipeline import ForwardContext, run_comparison

        pipeline, dataset = small_pipeline
        return run_comparison(pipeline, ForwardContext.from_dataset(dataset), n_cases=1, include_tv=False, seed=3)

    def test_cases(self, report):
        assert len(report.cases) == 2
        assert [c.family for c in report.cases] == ["normal", "obese"]
        assert report.methods == ["proposed", "tikhonov"]
        for case in report.cases:
            assert case.truth.shape == (16, 16)
            assert set(case.metrics["proposed"]) == {"relative_l2", "dice", "components"}
            assert case.truth_components >= 1

    def test_case_seeds_disjoint_from_training(self, report, dataset):
        from src.phantom_data import phantom_seed

        training = {phantom_seed(dataset.manifest["seed"], n) for n in range(dataset.n_base)}
        assert not {c.seed for c in report.cases} & training

    def test_summary(self, report):
        summary = report.summary()
        assert set(summary) == {"normal", "obese"}
        stats = summary["normal"]
        assert stats["n_cases"] == 1
        assert 0.0 <= stats["proposed_beats_tikhonov"] <= 1.0
        assert stats["tikhonov"]["mean_relative_l2"] >= 0.0

    def test_save(self, tmp_path, report):
        from src.artifacts import read_json

        report.save(tmp_path)
        saved = read_json(tmp_path / "report.json")
        assert saved["config"]["n_cases"] == 1
        assert saved["config"]["tv"] is None
        assert len(saved["cases"]) == 2
        assert (tmp_path / "case_000_normal.png").exists()
        assert (tmp_path / "raw" / "case_001_obese_truth.f32").exists()

    def test_with_total_variation(self, small_pipeline):
        from src.baseline_recon import TVConfig
        from src.pipeline import ForwardContext, run_comparison

        pipeline, dataset = small_pipeline
        report = run_comparison(
            pipeline,
            ForwardContext.from_dataset(dataset),
            families=("normal",),
            n_cases=1,
            tv_cfg=TVConfig(noise_level=0.05, max_iters=5),
        )
        assert report.methods == ["proposed", "tikhonov", "tv"]
        assert np.all(np.isfinite(report.cases[0].images["tv"]))


@pytest.mark.integration
class TestManifold:
    """Decoded latent grids, axis walks and interpolation"""

    def test_latent_grid(self, pipeline):
        from src.pipeline import latent_grid_images
        from src.vae import decode

        tiles = latent_grid_images(pipeline.vae, resolution=3)
        assert tiles.shape == (3, 3, 16, 16)
        np.testing.assert_allclose(tiles[0, 2], decode(pipeline.vae, np.array([-3.0, 3.0])), atol=1e-6)

    def test_latent_grid_needs_two_dimensions(self, dataset):
        from src.errors import ModelConfigError
        from src.pipeline import latent_grid_images
        from src.vae import VaeModel

        vae = VaeModel(latent_dim=3, grid_size=16, E=8, c_norm=dataset.c_norm, channels=(4, 4, 4, 4))
        with pytest.raises(ModelConfigError):
            latent_grid_images(vae)

    def test_axis_walk_telescopes(self, pipeline):
        """Consecutive differences add up to the end-to-end change"""
        from src.pipeline import latent_axis_walk

        walk = latent_axis_walk(pipeline.vae, 1, deltas=(-2, -1, 0, 1, 2))
        assert walk.images.shape == (5, 16, 16)
        assert walk.tangents.shape == (4, 16, 16)
        np.testing.assert_allclose(walk.tangents.sum(axis=0), walk.images[-1] - walk.images[0], atol=1e-9)
        with pytest.raises(ValueError):
            latent_axis_walk(pipeline.vae, 2)

    def test_interpolation_endpoints(self, pipeline, dataset):
        from src.pipeline import latent_interpolation
        from src.vae import decode, encode

        a, b = dataset.images[0], dataset.images[1]
        ends = latent_interpolation(pipeline.vae, a, b, ts=(0.0, 1.0))
        np.testing.assert_allclose(ends[0], decode(pipeline.vae, encode(pipeline.vae, a).mu), atol=1e-5)
        np.testing.assert_allclose(ends[1], decode(pipeline.vae, encode(pipeline.vae, b).mu), atol=1e-5)

    def test_interpolation_check(self, pipeline, dataset):
        from src.pipeline import interpolation_check

        result = interpolation_check(pipeline.vae, dataset.images, n_pairs=4, seed=1)
        assert len(result["component_counts"]) == 4 * 3
        assert 0.0 <= result["min_fraction_in_range"] <= 1.0
        assert 0.0 <= result["fraction_one_or_two_components"] <= 1.0

    def test_save_figures(self, tmp_path, pipeline):
        from src.pipeline import save_manifold_figures

        paths = save_manifold_figures(tmp_path, pipeline.vae, resolution=3, deltas=(-1, 0, 1))
        assert [p.name for p in paths] == ["latent_grid.png", "axis_walks.png", "axis_tangents.png"]
        assert all(p.exists() for p in paths)


@pytest.mark.integration
class TestStability:
    @pytest.fixture(scope="class")
    def table(self, small_pipeline):
        from src.fem_forward import ForwardModel
        from src.pipeline import sample_phantom_pairs, stability_probe

        pipeline, dataset = small_pipeline
        pairs = sample_phantom_pairs(4, seed=2)
        return stability_probe(pipeline, ForwardModel(dataset.mesh, dataset.layout), pairs)

    def test_sorted_with_envelope(self, table):
        """Rows are sorted by data distance and the envelope is the running maximum"""
        assert len(table) == 4
        assert np.all(np.diff(table.data_distance) >= 0)
        assert np.all(np.diff(table.envelope) >= 0)
        assert np.all(table.envelope >= table.recon_distance)

    def test_modulus(self, table):
        assert table.modulus(-1.0) == 0.0
        assert table.modulus(np.inf) == pytest.approx(table.recon_distance.max())
        assert table.modulus(table.data_distance[0]) == pytest.approx(table.recon_distance[0])

    def test_to_dict(self, table):
        data = table.to_dict()
        assert len(data["data_distance"]) == len(data["envelope"]) == 4

    def test_pairs_are_seeded(self):
        from src.pipeline import sample_phantom_pairs

        assert sample_phantom_pairs(3, 5) == sample_phantom_pairs(3, 5)

    def test_identical_pair(self, small_pipeline):
        """A phantom paired with itself, or with an equal copy, sits at (0, 0)"""
        from src.fem_forward import ForwardModel
        from src.phantom_data import sample_phantom
        from src.pipeline import stability_probe

        pipeline, dataset = small_pipeline
        same = sample_phantom("normal", 8)
        pairs = [(same, same), (sample_phantom("obese", 9), sample_phantom("obese", 9))]
        table = stability_probe(pipeline, ForwardModel(dataset.mesh, dataset.layout), pairs)
        np.testing.assert_array_equal(table.data_distance, [0.0, 0.0])
        np.testing.assert_array_equal(table.recon_distance, [0.0, 0.0])
        assert table.modulus(0.0) == 0.0


@pytest.mark.integration
class TestDataConsistency:
    def test_linearized_residual(self, small_pipeline):
        from src.pipeline import ForwardContext, linearized_residual

        pipeline, dataset = small_pipeline
        residual = linearized_residual(pipeline, ForwardContext.from_dataset(dataset), dataset.frames[0])
        assert np.isfinite(residual) and residual >= 0

    def test_report_directory(self, tmp_path):
        from src.pipeline import report_directory

        directory = report_directory(tmp_path, "compare")
        assert directory.is_dir()
        assert directory.name.startswith("compare-")
