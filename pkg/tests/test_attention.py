"""Block configuration rules, forward semantics, and gradient behavior."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from da2net import ConfigError, Rng, Tensor, tensor_create
from da2net.attention import (
    AttentionBlockConfig,
    AttentionLayerConfig,
    adaptive_select,
    block_state_items,
    da2net_backward,
    da2net_forward,
    default_block_config,
    diverse_extract_layer,
    init_block_params,
    validate_block_config,
    watch_block,
)
from da2net.checks import GRAD_TOLERANCE, check_da2net
from da2net.ops import (
    BatchNormParams,
    OpTape,
    batch_norm,
    conv1d_channel,
    conv2d_grouped,
    global_avg_pool,
    reduce_sum,
    sigmoid,
)
from da2net.tensor import elementwise_scale_broadcast

# every filter combination reported in the source ablation
ABLATION_COMBOS = [(7, 7, 7), (9, 9, 9), (3, 5, 7), (5, 7, 9), (3, 7, 9),
                   (3, 5, 9), (3, 5, 7, 9)]

INVALID_CONFIGS = [
    (AttentionBlockConfig.from_sizes((4,)), 64, "n must satisfy n=2x\\+1"),
    (AttentionBlockConfig.from_sizes((11,)), 64, "n must satisfy n=2x\\+1"),
    (AttentionBlockConfig.from_sizes((1,)), 64, "n must satisfy n=2x\\+1"),
    (AttentionBlockConfig.from_sizes((3,), alpha=4), 64, "alpha must satisfy"),
    (AttentionBlockConfig.from_sizes((3,), alpha=17), 64, "alpha must satisfy"),
    (AttentionBlockConfig.from_sizes((3,), alpha=1), 64, "alpha must satisfy"),
    (AttentionBlockConfig.from_sizes((7, 5, 3)), 64, "non-decreasing"),
    (AttentionBlockConfig.from_sizes((5, 3)), 64, "non-decreasing"),
    (AttentionBlockConfig.from_sizes((3,), g=3), 64, "g must be one of"),
    (AttentionBlockConfig.from_sizes((3,), g=32), 64, "g must be one of"),
    (AttentionBlockConfig.from_sizes((3,), g=16), 24, "does not divide"),
    (AttentionBlockConfig.from_sizes((3, 3, 3, 3, 3)), 64, "at most 4 layers"),
]


class TestValidation:
    @pytest.mark.parametrize("sizes", ABLATION_COMBOS)
    def test_reported_combinations_accepted(self, sizes):
        cfg = AttentionBlockConfig.from_sizes(sizes, g=1, alpha=9)
        assert validate_block_config(cfg, 256) is cfg

    @pytest.mark.parametrize("cfg,channels,msg", INVALID_CONFIGS)
    def test_invalid_configurations_rejected(self, cfg, channels, msg):
        with pytest.raises(ConfigError, match=msg):
            validate_block_config(cfg, channels)

    def test_ascending_enforcement_can_be_disabled(self):
        cfg = AttentionBlockConfig.from_sizes((7, 5, 3), enforce_ascending=False)
        validate_block_config(cfg, 64)

    def test_equal_sizes_are_non_decreasing(self):
        validate_block_config(AttentionBlockConfig.from_sizes((7, 7, 7)), 64)

    def test_non_ascending_permutations_rejected(self):
        import itertools

        for perm in itertools.permutations((3, 5, 7)):
            cfg = AttentionBlockConfig.from_sizes(perm)
            if perm == (3, 5, 7):
                validate_block_config(cfg, 64)
            else:
                with pytest.raises(ConfigError):
                    validate_block_config(cfg, 64)

    def test_default_config_is_best_ablation(self):
        cfg = default_block_config()
        assert tuple(layer.n for layer in cfg.layers) == (3, 5, 7)
        assert all(layer.g == 1 and layer.alpha == 9 for layer in cfg.layers)


class TestDiverseExtract:
    def test_shape_and_range(self, rng):
        cfg = AttentionLayerConfig(n=5, g=1, alpha=3)
        block = init_block_params(AttentionBlockConfig(layers=(cfg,)), 6, rng)
        z = Tensor(rng.normal((2, 6, 7, 7)))
        out = diverse_extract_layer(z, block.layers[0], "train")
        assert out.shape == z.shape
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_zero_weights_give_half(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng)
        layer = block.layers[0]
        layer.conv.weight = tensor_create(layer.conv.weight.shape, 0.0)
        layer.bn.gamma = tensor_create([4], 0.0)
        layer.bn.beta = tensor_create([4], 0.0)
        z = Tensor(rng.normal((1, 4, 5, 5)))
        out = diverse_extract_layer(z, layer, "train")
        assert np.allclose(out.data, 0.5, atol=1e-7)

    def test_matches_hand_composed_pipeline(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), g=1, alpha=3)
        block = init_block_params(cfg, 4, rng)
        layer = block.layers[0]
        z = Tensor(rng.normal((1, 4, 8, 8)))
        out = diverse_extract_layer(z, layer, "eval")
        y = conv2d_grouped(z, layer.conv)
        y = batch_norm(y, BatchNormParams(gamma=layer.bn.gamma, beta=layer.bn.beta),
                       "eval")
        expected = sigmoid(y)
        assert np.allclose(out.data, expected.data, atol=1e-6)


class TestAdaptiveSelect:
    def test_identity_kernel_on_constant_channels(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng)
        layer = block.layers[0]
        layer.select_kernel = tensor_create([3], [0.0, 1.0, 0.0])
        consts = np.array([0.2, -1.0, 0.5, 2.0], dtype=np.float32)
        zd = Tensor(np.broadcast_to(consts.reshape(1, 4, 1, 1), (1, 4, 3, 3)).copy())
        out = adaptive_select(zd, layer)
        expected = 1.0 / (1.0 + np.exp(-consts))
        assert np.allclose(out.data[0], expected, atol=1e-6)

    def test_zero_kernel_gives_half(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng)
        block.layers[0].select_kernel = tensor_create([3], 0.0)
        zd = Tensor(rng.uniform((2, 4, 3, 3)))
        assert np.allclose(adaptive_select(zd, block.layers[0]).data, 0.5)

    def test_matches_primitive_composition(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=9)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            block = init_block_params(cfg, 16, rng)
            zd = Tensor(rng.uniform((2, 16, 4, 4)))
            out = adaptive_select(zd, block.layers[0])
            pooled = global_avg_pool(zd)
            expected = sigmoid(conv1d_channel(pooled, block.layers[0].select_kernel))
        assert np.allclose(out.data, expected.data, atol=1e-6)


class TestBlockForward:
    def test_identity_gate_returns_extracted_map(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng)
        z = Tensor(rng.normal((1, 4, 6, 6)))
        zd = diverse_extract_layer(z, block.layers[0], "eval")
        ones = tensor_create([1, 4, 1, 1], 1.0)
        gated = elementwise_scale_broadcast(zd, ones)
        assert np.array_equal(gated.data, zd.data)

    def test_adaptive_off_returns_extracted_map(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3, adaptive=False)
        block = init_block_params(cfg, 4, rng)
        z = Tensor(rng.normal((1, 4, 6, 6)))
        out = da2net_forward(z, block, "eval")
        expected = diverse_extract_layer(z, block.layers[0], "eval")
        assert np.array_equal(out.data, expected.data)

    def test_three_layer_output_bounded(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3, 5, 7), alpha=3)
        block = init_block_params(cfg, 4, rng)
        z = Tensor(rng.normal((2, 4, 8, 8), std=3.0))
        out = da2net_forward(z, block, "train")
        assert out.shape == z.shape
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_multi_layer_equals_manual_composition(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3, 5), alpha=3)
        block = init_block_params(cfg, 4, rng)
        z = Tensor(rng.normal((1, 4, 6, 6)))
        out = da2net_forward(z, block, "eval")

        x = z
        for layer in block.layers:
            zd = diverse_extract_layer(x, layer, "eval")
            za = adaptive_select(zd, layer)
            gates = Tensor(za.data.reshape(za.shape[0], za.shape[1], 1, 1))
            x = elementwise_scale_broadcast(zd, gates)
        assert np.allclose(out.data, x.data, atol=1e-6)

    def test_gate_never_amplifies(self, rng):
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng)
        z = Tensor(rng.normal((1, 4, 6, 6)))
        zd = diverse_extract_layer(z, block.layers[0], "eval")
        out = da2net_forward(z, block, "eval")
        assert np.all(np.abs(out.data) <= np.abs(zd.data) + 1e-7)

    @given(st.sampled_from([(3,), (5,), (3, 5), (3, 5, 7)]),
           st.sampled_from([1, 2]), st.sampled_from([3, 5]))
    @settings(max_examples=12, deadline=None)
    def test_shape_preserved_for_valid_configs(self, sizes, g, alpha):
        rng = Rng(hash((sizes, g, alpha)) & 0xFFFF)
        cfg = AttentionBlockConfig.from_sizes(sizes, g=g, alpha=alpha)
        block = init_block_params(cfg, 8, rng)
        z = Tensor(rng.normal((2, 8, 6, 6)))
        for mode in ("train", "eval"):
            assert da2net_forward(z, block, mode).shape == z.shape

    def test_pointwise_variant_runs_and_preserves_shape(self, rng):
        layers = tuple(AttentionLayerConfig(n=n, alpha=3, use_pointwise_reduction=True)
                       for n in (3, 5, 7))
        cfg = AttentionBlockConfig(layers=layers)
        block = init_block_params(cfg, 32, rng)
        z = Tensor(rng.normal((1, 32, 6, 6)))
        out = da2net_forward(z, block, "train")
        assert out.shape == z.shape
        assert block.layers[0].conv is None
        assert block.layers[0].pw_reduce.weight.shape == (2, 32, 1, 1)


class TestBlockBackward:
    def test_single_layer_gradcheck(self):
        errs = check_da2net(seed=0, cases=[((3,), 1, 3, 4)])
        assert max(errs.values()) < GRAD_TOLERANCE

    def test_three_layer_gradcheck(self):
        errs = check_da2net(seed=0, cases=[((3, 5, 7), 1, 3, 4)])
        assert max(errs.values()) < GRAD_TOLERANCE

    def test_zero_gate_blocks_upstream_gradient(self, rng):
        # depthwise conv per channel; gating channel 0 with exactly 0 must
        # zero that channel's conv weight gradient through the gated path
        cfg = AttentionBlockConfig.from_sizes((3,), alpha=3)
        block = init_block_params(cfg, 4, rng, dtype="f64")
        z = Tensor(rng.normal((1, 4, 5, 5), dtype="f64"))
        gate = tensor_create([1, 4, 1, 1], [0.0, 1.0, 1.0, 1.0], dtype="f64")

        tape = OpTape()
        watch_block(tape, block)
        zd = diverse_extract_layer(z, block.layers[0], "train", tape)
        gated = elementwise_scale_broadcast(zd, gate, tape)
        reduce_sum(gated, tape)
        grads = da2net_backward(tape)
        conv_grad = grads["l0.conv.w"].data
        assert np.all(conv_grad[0] == 0.0)
        assert np.any(conv_grad[1:] != 0.0)

    def test_parameter_count_closed_form(self, rng):
        # sizes {n_j}, g=1: sum over layers of n^2*C + 4C + alpha stored floats
        channels, alpha = 16, 5
        cfg = AttentionBlockConfig.from_sizes((3, 5, 7), g=1, alpha=alpha)
        block = init_block_params(cfg, channels, rng)
        params, buffers = block_state_items(block)
        stored = sum(t.size for t in params.values()) + sum(t.size for t in buffers.values())
        expected = sum(n * n * channels + 4 * channels + alpha for n in (3, 5, 7))
        assert stored == expected
