"""Tests for saliency, grad-CAM and the overlay renderer."""

import numpy as np
import pytest
from PIL import Image as PILImage

from lighttbnet.core.errors import ExplainError
from lighttbnet.core.explain import (Heatmap, explain_image, gradcam, gradcam_from_activations, hot_colormap,
                                     max_normalize, overlay, render_overlay, saliency)
from lighttbnet.core.model import build
from lighttbnet.core.tensor import Tensor, matmul, reshape, softmax


class TestSaliency:
    """Input-gradient saliency."""

    def test_linear_model_follows_weight_difference(self, float64, rng):
        weights = Tensor(rng.normal(size=(36, 2)))

        def model(x):
            return softmax(matmul(reshape(x, (1, 36)), weights), axis=1)

        heat = saliency(model, rng.random((6, 6)))
        diff = np.abs(weights.data[:, 1] - weights.data[:, 0]).reshape(6, 6)
        np.testing.assert_allclose(heat.values, diff / diff.max(), rtol=1e-6)
        assert heat.method == "saliency"
        assert 0.0 <= heat.tb_score <= 1.0

    def test_model_output_shape_checked(self, float64):
        with pytest.raises(ExplainError):
            saliency(lambda x: softmax(reshape(x, (2, 2)), axis=1), np.zeros((2, 2)))

    def test_lighttbnet_map_range(self, tiny_config, rng):
        model = build(tiny_config)
        heat = saliency(model, rng.normal(size=(32, 32)))
        assert heat.values.shape == (32, 32)
        assert heat.values.min() >= 0.0 and heat.values.max() == pytest.approx(1.0)
        assert all(p.grad is None or not p.grad.any() for p in model.parameters())


class TestGradcam:
    """Class-activation maps at a named layer."""

    def test_weighted_sum_and_relu(self):
        activations = np.stack([np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2))])
        gradients = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        np.testing.assert_allclose(gradcam_from_activations(activations, gradients), [[0.25, 0.5], [0.75, 1.0]])

    def test_negative_evidence_clipped_to_zero(self):
        activations = np.stack([np.ones((2, 2)), 2 * np.ones((2, 2))])
        gradients = np.stack([np.ones((2, 2)), -np.ones((2, 2))])
        assert not gradcam_from_activations(activations, gradients).any()

    def test_mismatched_inputs(self):
        with pytest.raises(ExplainError):
            gradcam_from_activations(np.ones((2, 3, 3)), np.ones((2, 3, 4)))

    def test_native_resolution_of_last_block(self, tiny_config, rng):
        heat = gradcam(build(tiny_config), rng.normal(size=(32, 32)), upsample=False)
        assert heat.target_layer == "blocks.1"
        assert heat.values.shape == (8, 8)
        assert heat.values.min() >= 0.0 and heat.values.max() <= 1.0

    def test_upsampled_to_input(self, tiny_config, rng):
        heat = gradcam(build(tiny_config), rng.normal(size=(32, 32)), target_layer="blocks.0")
        assert heat.values.shape == (32, 32)
        assert heat.values.min() >= 0.0
        assert 0.0 <= heat.tb_score <= 1.0

    def test_unknown_or_flat_layer(self, tiny_config):
        model = build(tiny_config)
        with pytest.raises(ExplainError):
            gradcam(model, np.zeros((32, 32)), target_layer="blocks.9")
        with pytest.raises(ExplainError):
            gradcam(model, np.zeros((32, 32)), target_layer="fc1")


class TestOverlay:
    """Colour mapping, blending and the rendered PNG."""

    def test_max_normalize(self):
        np.testing.assert_allclose(max_normalize(np.array([0.0, 2.0, 4.0])), [0.0, 0.5, 1.0])
        assert not max_normalize(np.zeros(3)).any()

    def test_hot_colormap_ends(self):
        np.testing.assert_allclose(hot_colormap(np.array([0.0, 1.0])), [[0, 0, 0], [1, 1, 1]])

    def test_zero_heat_keeps_base(self, rng):
        base = rng.random((5, 7))
        out = overlay(base, np.zeros_like(base))
        expected = np.floor(base * 255.0 + 0.5).astype(np.uint8)
        for c in range(3):
            np.testing.assert_array_equal(out[..., c], expected)

    def test_shape_mismatch(self):
        with pytest.raises(ExplainError):
            overlay(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_render_three_panels_with_score(self, tmp_path, rng):
        image = rng.random((32, 32))
        sal = Heatmap(rng.random((32, 32)), "saliency", tb_score=0.82151)
        cam = Heatmap(rng.random((32, 32)), "gradcam", "blocks.1", tb_score=0.82151)
        path = render_overlay(image, sal, cam, tmp_path / "cxr_overlay.png")
        with PILImage.open(path) as png:
            assert png.size == (96, 32)
            assert png.text["tb_score"] == "0.8215"
        assert (tmp_path / "cxr_overlay.txt").read_text(encoding="utf-8").strip() == "score=0.8215"

    def test_explain_image(self, tiny_config, tmp_path, rng):
        summary = explain_image(build(tiny_config), rng.random((32, 32)), tmp_path / "out.png")
        assert (tmp_path / "out.png").is_file()
        assert summary["gradcam"]["target_layer"] == "blocks.1"
        assert 0.0 <= summary["tb_score"] <= 1.0
