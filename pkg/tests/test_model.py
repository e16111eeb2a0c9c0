"""Tests for LightTBNet construction, forward pass, registries and cost accounting."""

import numpy as np
import pytest

from lighttbnet.core.efficiency import count_macs, count_params
from lighttbnet.core.errors import ConfigError, ShapeError
from lighttbnet.core.model import ModelConfig, build, default_channel_plan, parameter_registry, state_registry
from lighttbnet.core.tensor import Tensor, gradcheck, pick, log, no_grad

from .test_layers import naive_conv


def _expected_params(config: ModelConfig) -> int:
    total = 0
    channels = config.input_channels
    for width in config.channel_plan:
        total += channels * width * 9 + width      # conv1
        total += 2 * width                         # bn1
        total += width * width * 9 + width         # conv2
        total += 2 * width                         # bn2
        total += channels * width + width          # skip
        channels = 2 * width
    total += channels * config.reduce_channels + config.reduce_channels
    total += config.flatten_features * config.fc_hidden + config.fc_hidden
    total += config.fc_hidden * 2 + 2
    return total


class TestModelConfig:
    """Validation and serialisation of the architecture config."""

    def test_default_channel_plan(self):
        assert default_channel_plan(3) == [32, 64, 128]
        assert default_channel_plan(5) == [32, 64, 128, 128, 128]

    def test_for_blocks(self):
        config = ModelConfig.for_blocks(5)
        assert config.channel_plan == (32, 64, 128, 128, 128)
        assert config.final_size == 8

    @pytest.mark.parametrize("kwargs", [
        {"n_blocks": 1, "channel_plan": (4,)},
        {"n_blocks": 7, "channel_plan": (4,) * 7},
        {"n_blocks": 2, "channel_plan": (4, 4, 4)},
        {"n_blocks": 3, "channel_plan": (4, 4, 4), "input_size": 36},
        {"n_blocks": 2, "channel_plan": (4, 0)},
        {"n_blocks": 2, "channel_plan": (4, 4), "n_classes": 3},
    ])
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs).validate()

    def test_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config

    def test_from_dict_fills_channel_plan(self):
        assert ModelConfig.from_dict({"n_blocks": 3}).channel_plan == (32, 64, 128)


class TestForward:
    """Forward pass shapes, probabilities and determinism."""

    def test_output_is_row_stochastic(self, tiny_config, rng):
        model = build(tiny_config)
        x = Tensor(rng.normal(size=(3, 1, 32, 32)))
        probs = model(x).data
        assert probs.shape == (3, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-6)
        assert ((probs >= 0) & (probs <= 1)).all()

    def test_activation_shapes(self, tiny_config, rng):
        model = build(tiny_config)
        _, acts = model.forward_with_activations(Tensor(rng.normal(size=(2, 1, 32, 32))))
        assert acts["blocks.0"].shape == (2, 4, 16, 16)
        assert acts["blocks.1"].shape == (2, 4, 8, 8)
        assert acts["reduce"].shape == (2, 2, 8, 8)
        assert acts["fc1"].shape == (2, 4)

    def test_wrong_input_shape(self, tiny_config):
        model = build(tiny_config)
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 1, 16, 16))))
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 32, 32))))

    def test_same_seed_same_weights(self, tiny_config):
        a, b = build(tiny_config), build(tiny_config)
        for (name_a, wa), (name_b, wb) in zip(state_registry(a), state_registry(b)):
            assert name_a == name_b
            np.testing.assert_array_equal(wa, wb)

    def test_different_seed_different_weights(self, tiny_config):
        other = ModelConfig(**{**tiny_config.to_dict(), "seed": tiny_config.seed + 1})
        wa = build(tiny_config).blocks[0].conv1.weight.data
        wb = build(other).blocks[0].conv1.weight.data
        assert not np.array_equal(wa, wb)

    def test_eval_mode_is_batch_independent(self, tiny_config, rng):
        model = build(tiny_config).eval()
        x = rng.normal(size=(4, 1, 32, 32))
        with no_grad():
            together = model.tb_scores(Tensor(x))
            alone = model.tb_scores(Tensor(x[:1]))
        np.testing.assert_allclose(together[0], alone[0], rtol=1e-5)

    def test_end_to_end_gradients(self, tiny_config, float64, rng):
        model = build(tiny_config)
        x = Tensor(rng.normal(size=(2, 1, 32, 32)))

        def fn():
            return -log(pick(model(x), [0, 1])).mean()

        for name, param in parameter_registry(model):
            assert gradcheck(fn, [param], h=1e-6) < 1e-3, name


class TestRegistries:
    """Stable ordering of parameters and checkpoint state."""

    def test_parameter_order(self, tiny_config):
        names = [name for name, _ in parameter_registry(build(tiny_config))]
        assert names[:10] == [
            "blocks.0.conv1.weight", "blocks.0.conv1.bias", "blocks.0.bn1.gamma", "blocks.0.bn1.beta",
            "blocks.0.conv2.weight", "blocks.0.conv2.bias", "blocks.0.bn2.gamma", "blocks.0.bn2.beta",
            "blocks.0.skip.weight", "blocks.0.skip.bias",
        ]
        assert names[-6:] == ["reduce.weight", "reduce.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]

    def test_state_places_running_stats_after_beta(self, tiny_config):
        names = [name for name, _ in state_registry(build(tiny_config))]
        i = names.index("blocks.0.bn1.beta")
        assert names[i + 1:i + 3] == ["blocks.0.bn1.running_mean", "blocks.0.bn1.running_var"]

    def test_load_state_shape_mismatch(self, tiny_config):
        model = build(tiny_config)
        state = {name: array.copy() for name, array in state_registry(model)}
        state["fc2.bias"] = np.zeros(3)
        with pytest.raises(ShapeError):
            model.load_state(state)


class TestCounting:
    """Parameter and MAC accounting."""

    @pytest.mark.parametrize("n_blocks", [3, 4, 5])
    def test_param_count_matches_stored_scalars(self, n_blocks):
        config = ModelConfig.for_blocks(n_blocks)
        stored = sum(array.size for name, array in parameter_registry(build(config)))
        assert count_params(config) == stored == _expected_params(config)
        assert count_macs(config).total_params == stored

    def test_macs_match_counted_multiplies(self):
        config = ModelConfig(n_blocks=2, channel_plan=(3, 4), reduce_channels=2, fc_hidden=5, input_size=8)
        count = count_macs(config)
        counted = 0
        for layer in count.layers:
            if layer.kind == "Conv2D":
                _, C, H, W = layer.input_shape
                O = layer.output_shape[1]
                k = 1 if layer.name.endswith("skip") or layer.name == "reduce" else 3
                w = np.zeros((O, C, k, k))
                _, mults = naive_conv(np.zeros((1, C, H, W)), w, np.zeros(O), padding=(k - 1) // 2)
                counted += mults
            elif layer.kind == "Linear":
                counted += layer.input_shape[1] * layer.output_shape[1]
        assert count.total_macs == counted

    def test_layer_profile_shapes(self):
        rows = {layer.name: layer for layer in count_macs(ModelConfig.for_blocks(4)).layers}
        assert rows["blocks.0.conv1"].macs == 4_718_592 * 4
        assert rows["blocks.3.pool"].output_shape == (1, 256, 16, 16)
        assert rows["fc1"].input_shape == (1, 32 * 16 * 16)
