"""
Tests for the differentiable toolkit
"""

import pytest
import torch


def tiny_conv_net():
    from src.diffkit import LayerSpec, Network

    return Network(
        [
            LayerSpec.conv(1, 2),
            LayerSpec.batchnorm(2),
            LayerSpec.tanh(),
            LayerSpec.flatten(),
            LayerSpec.dense(2 * 4 * 4, 3),
        ],
        (1, 8, 8),
    )


class TestNetworkShapes:
    """Layer specs compiled against a fixed input shape"""

    def test_conv_halves_tconv_doubles(self):
        from src.diffkit import LayerSpec, Network

        net = Network([LayerSpec.conv(1, 4), LayerSpec.relu(), LayerSpec.tconv(4, 1)], (1, 8, 8))
        out = net(torch.zeros(3, 1, 8, 8))
        assert tuple(out.shape) == (3, 1, 8, 8)
        assert net.output_shape == (1, 8, 8)

    def test_dense_mismatch(self):
        from src.diffkit import LayerSpec, Network
        from src.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError) as info:
            Network([LayerSpec.dense(4, 2), LayerSpec.dense(3, 1)], (4,))
        assert info.value.layer_index == 1
        assert info.value.kind == "dense"

    def test_odd_spatial_size_rejected(self):
        from src.diffkit import LayerSpec, Network
        from src.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            Network([LayerSpec.conv(1, 2)], (1, 7, 7))

    def test_bad_reshape(self):
        from src.diffkit import LayerSpec, Network
        from src.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            Network([LayerSpec.dense(4, 6), LayerSpec.reshape(1, 2, 2)], (4,))

    def test_input_shape_checked(self):
        from src.errors import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            tiny_conv_net()(torch.zeros(2, 1, 6, 6))

    def test_description_round_trip(self):
        from src.diffkit import Network

        net = tiny_conv_net()
        rebuilt = Network.from_description(net.describe())
        assert rebuilt.specs == net.specs
        assert rebuilt.output_shape == net.output_shape

    def test_count_parameters(self):
        from src.diffkit import LayerSpec, Network, count_parameters

        assert count_parameters(Network([LayerSpec.dense(3, 2)], (3,))) == 8


class TestInitialization:
    def test_seeded(self):
        """Same seed, same weights; biases start at zero"""
        from src.diffkit import initialize

        a = initialize(tiny_conv_net(), 3)
        b = initialize(tiny_conv_net(), 3)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), name
        assert torch.count_nonzero(a.layers[0].bias) == 0
        c = initialize(tiny_conv_net(), 4)
        assert not torch.equal(a.layers[0].weight, c.layers[0].weight)

    def test_global_rng_untouched(self):
        from src.diffkit import initialize

        torch.manual_seed(5)
        expected = torch.rand(4)
        torch.manual_seed(5)
        initialize(tiny_conv_net(), 0)
        assert torch.equal(torch.rand(4), expected)


class TestForwardBackward:
    """Cached reverse-mode gradients"""

    def test_dense_gradients(self):
        """Bias gradient counts the batch; input gradient is the column sum of W"""
        from src.diffkit import LayerSpec, Mode, Network, backward, forward

        net = Network([LayerSpec.dense(3, 2)], (3,))
        x = torch.randn(5, 3)
        out, cache = forward(net, x, Mode.TRAIN)
        grads = backward(cache, torch.ones_like(out))
        torch.testing.assert_close(grads.params["layers.0.bias"], torch.full((2,), 5.0))
        expected_input = net.layers[0].weight.detach().sum(dim=0).expand(5, 3)
        torch.testing.assert_close(grads.input, expected_input)
        torch.testing.assert_close(grads.params["layers.0.weight"], torch.ones(2, 5) @ x)

    def test_eval_mode_has_no_cache(self):
        from src.diffkit import backward, forward
        from src.errors import StaleCacheError

        out, cache = forward(tiny_conv_net(), torch.randn(2, 1, 8, 8), "eval")
        assert cache is None
        with pytest.raises(StaleCacheError):
            backward(cache, torch.ones_like(out))

    def test_cache_consumed_once(self):
        from src.diffkit import backward, forward
        from src.errors import StaleCacheError

        out, cache = forward(tiny_conv_net(), torch.randn(4, 1, 8, 8), "train")
        backward(cache, torch.ones_like(out))
        with pytest.raises(StaleCacheError):
            backward(cache, torch.ones_like(out))

    def test_network_gradient_check(self):
        """Train-mode gradients through conv, batchnorm and tanh agree with central differences"""
        from src.diffkit import initialize, network_gradient_check

        net = initialize(tiny_conv_net(), 0)
        x = torch.randn(4, 1, 8, 8, generator=torch.Generator().manual_seed(0))
        assert network_gradient_check(net, x, "train") < 1e-5

    def test_finite_difference_check(self):
        from src.diffkit import finite_difference_check

        a = torch.randn(6)
        assert finite_difference_check(lambda t: (t * t).sum() + t.sin().sum(), [a]) < 1e-6


class TestAdam:
    def test_first_step_moves_by_lr(self):
        """Bias correction makes the first step lr * sign(grad)"""
        from src.diffkit import LayerSpec, Network, ParameterSet, adam_step

        net = Network([LayerSpec.dense(3, 2)], (3,))
        before = {name: p.detach().clone() for name, p in net.named_parameters()}
        params = ParameterSet(net, lr=0.01)
        grads = {name: torch.ones_like(p) for name, p in net.named_parameters()}
        adam_step(params, grads)
        for name, p in net.named_parameters():
            torch.testing.assert_close(before[name] - p.detach(), torch.full_like(p, 0.01), atol=1e-6, rtol=0)
        m, v = params.moments("layers.0.bias")
        assert m is not None and v is not None
        assert params.step_count == 1

    def test_learning_rate_override(self):
        from src.diffkit import LayerSpec, Network, ParameterSet, adam_step

        net = Network([LayerSpec.dense(2, 1)], (2,))
        bias = net.layers[0].bias.detach().clone()
        params = ParameterSet(net, lr=0.01)
        adam_step(params, {"layers.0.bias": -torch.ones(1)}, lr=0.5)
        torch.testing.assert_close(net.layers[0].bias.detach() - bias, torch.full((1,), 0.5), atol=1e-6, rtol=0)

    def test_quadratic_bowl(self):
        """500 steps at lr 0.01 bring x from ||x|| = 1 to within 1e-2 of the minimum of ||x||^2"""
        from src.diffkit import ParameterSet, adam_step

        bowl = torch.nn.Module()
        bowl.x = torch.nn.Parameter(torch.full((4,), 0.5))
        params = ParameterSet(bowl, lr=0.01)
        for _ in range(500):
            adam_step(params, {"x": 2.0 * bowl.x.detach()})
        assert float(bowl.x.detach().norm()) < 1e-2
        assert params.step_count == 500

    def test_named_moments(self):
        from src.diffkit import LayerSpec, Network, ParameterSet, adam_step
        from src.errors import ShapeMismatchError

        net = Network([LayerSpec.dense(3, 2)], (3,))
        params = ParameterSet(net)
        assert params.named_moments() == {}
        adam_step(params, {name: torch.ones_like(p) for name, p in net.named_parameters()})
        moments = params.named_moments()
        assert set(moments) == {"layers.0.weight", "layers.0.bias"}
        assert tuple(moments["layers.0.weight"]["exp_avg"].shape) == (2, 3)
        with pytest.raises(ShapeMismatchError):
            params.load_moments({"layers.9.bias": moments["layers.0.bias"]}, 1)
        with pytest.raises(ShapeMismatchError):
            params.load_moments({"layers.0.bias": moments["layers.0.weight"]}, 1)


class TestSampling:
    def test_gaussian_seeded(self):
        from src.diffkit import sample_gaussian

        assert torch.equal(sample_gaussian((3, 4), 9), sample_gaussian((3, 4), 9))
        assert not torch.equal(sample_gaussian((3, 4), 9), sample_gaussian((3, 4), 10))
        assert sample_gaussian((2,), 0, torch.float64).dtype == torch.float64

    def test_gaussian_moments(self):
        """10^6 draws have mean within 0.01 of 0 and variance in [0.98, 1.02]"""
        from src.diffkit import sample_gaussian

        draws = sample_gaussian((1_000_000,), 42, torch.float64)
        assert abs(float(draws.mean())) < 0.01
        assert 0.98 <= float(draws.var()) <= 1.02

    def test_index_loader_drops_tail(self):
        """Trailing short batch is dropped once n exceeds the batch size"""
        from src.diffkit import index_loader

        batches = [b[0] for b in index_loader(10, 4, 0)]
        assert [len(b) for b in batches] == [4, 4]
        assert len(set(torch.cat(batches).tolist())) == 8

    def test_index_loader_small_set(self):
        from src.diffkit import index_loader

        batches = [b[0] for b in index_loader(3, 8, 0)]
        assert len(batches) == 1
        assert sorted(batches[0].tolist()) == [0, 1, 2]

    def test_index_loader_seeded(self):
        from src.diffkit import index_loader

        first = [b[0].tolist() for b in index_loader(20, 5, 7)]
        second = [b[0].tolist() for b in index_loader(20, 5, 7)]
        assert first == second

    def test_index_loader_rejects_single_samples(self):
        """Minibatches of one would break batch-normalized training"""
        from src.diffkit import index_loader
        from src.errors import ModelConfigError

        with pytest.raises(ModelConfigError):
            index_loader(10, 1, 0)
        with pytest.raises(ModelConfigError):
            index_loader(1, 8, 0)
        with pytest.raises(ModelConfigError):
            index_loader(0, 8, 0)
        assert [len(b[0]) for b in index_loader(2, 2, 0)] == [2]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        """Weights and batchnorm running statistics survive save and load"""
        from src.diffkit import Mode, forward, initialize, load_checkpoint, save_checkpoint

        net = initialize(tiny_conv_net(), 1)
        forward(net, torch.randn(4, 1, 8, 8), Mode.TRAIN)
        save_checkpoint(tmp_path, net, {"stage": "test"}, name="net")
        manifest, state = load_checkpoint(tmp_path, name="net")
        assert manifest["stage"] == "test"

        restored = tiny_conv_net()
        restored.load_state_dict(state)
        for key, tensor in net.state_dict().items():
            assert torch.equal(restored.state_dict()[key], tensor), key

    def test_optimizer_state_round_trip(self, tmp_path):
        """A restored checkpoint takes the same next Adam step as uninterrupted training"""
        from src.diffkit import (
            LayerSpec,
            Network,
            ParameterSet,
            adam_step,
            initialize,
            load_checkpoint,
            restore_optimizer,
            save_checkpoint,
        )

        net = initialize(Network([LayerSpec.dense(3, 2)], (3,)), 0)
        params = ParameterSet(net, lr=0.05, betas=(0.8, 0.99))
        grads = {name: torch.linspace(-1.0, 1.0, p.numel()).reshape(p.shape) for name, p in net.named_parameters()}
        for _ in range(3):
            adam_step(params, grads)
        save_checkpoint(tmp_path, net, {"stage": "test"}, name="net", params=params)

        manifest, state = load_checkpoint(tmp_path, name="net")
        assert manifest["optimizer"]["step_count"] == 3
        resumed = Network([LayerSpec.dense(3, 2)], (3,))
        resumed.load_state_dict(state)
        restored = restore_optimizer(tmp_path, resumed, name="net")
        assert restored.step_count == 3
        assert restored.optimizer.param_groups[0]["lr"] == 0.05
        assert tuple(restored.optimizer.param_groups[0]["betas"]) == (0.8, 0.99)
        for name, pair in params.named_moments().items():
            for slot, value in pair.items():
                torch.testing.assert_close(restored.named_moments()[name][slot], value)

        adam_step(params, grads)
        adam_step(restored, grads)
        for (name, p), q in zip(net.named_parameters(), resumed.parameters()):
            torch.testing.assert_close(q.detach(), p.detach(), msg=name)

    def test_restore_without_optimizer_state(self, tmp_path):
        from src.diffkit import LayerSpec, Network, restore_optimizer, save_checkpoint
        from src.errors import ArtifactMismatchError

        net = Network([LayerSpec.dense(3, 2)], (3,))
        save_checkpoint(tmp_path, net, {}, name="net")
        with pytest.raises(ArtifactMismatchError):
            restore_optimizer(tmp_path, net, name="net")
