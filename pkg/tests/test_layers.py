"""
Tests for the layer kernels and modules: the convolution against a
nested-loop reference, pooling, batch norm modes and cost accounting.
"""

import numpy as np
import pytest

from lighttbnet.core.errors import ShapeError
from lighttbnet.core.layers import BatchNorm2D, Conv2D, Linear, MaxPool2D, conv2d, max_pool2d
from lighttbnet.core.tensor import Tensor


def naive_conv(x, w, b, padding):
    """Reference cross-correlation; returns the output and its multiply count."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = H + 2 * padding - kh + 1
    out_w = W + 2 * padding - kw + 1
    out = np.zeros((B, O, out_h, out_w))
    multiplies = 0
    for n in range(B):
        for o in range(O):
            for i in range(out_h):
                for j in range(out_w):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i + u, j + v] * w[o, c, u, v]
                                multiplies += 1
                    out[n, o, i, j] = acc
    return out, multiplies // B


class TestConv2D:
    """Convolution forward pass and shape handling."""

    def test_matches_nested_loop_reference(self, float64):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.normal(size=(2, 3, 8, 8))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
            expected, _ = naive_conv(x, w, b, padding=1)
            np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-10)

    def test_no_kernel_flip(self, float64):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        out = conv2d(Tensor(x), Tensor(w), None, padding=0).data
        assert out[0, 0, 0, 0] == 0.0
        out = conv2d(Tensor(x), Tensor(w), None, padding=1).data
        # the single pixel lands under weight [1,1] at output (0,0)
        assert out[0, 0, 0, 0] == 4.0

    def test_strided_output_size(self, float64):
        out = conv2d(Tensor(np.ones((1, 1, 7, 7))), Tensor(np.ones((2, 1, 3, 3))), None, stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), None)

    def test_too_small_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), None, padding=0)

    def test_same_padding_needs_odd_kernel(self):
        with pytest.raises(ShapeError):
            Conv2D(1, 1, 2, padding="same")

    def test_param_count(self):
        assert Conv2D(1, 8, 3).param_count() == 80

    def test_macs_formula(self):
        assert Conv2D(1, 8, 3).macs((1, 1, 256, 256)) == 8 * 9 * 1 * 256 * 256 == 4_718_592

    def test_macs_match_counted_multiplies(self, float64):
        rng = np.random.default_rng(0)
        layer = Conv2D(3, 4, 3, padding="same", dtype=np.float64)
        x = rng.normal(size=(1, 3, 8, 8))
        _, counted = naive_conv(x, layer.weight.data, layer.bias.data, padding=1)
        assert layer.macs(x.shape) == counted

    def test_output_shape(self):
        assert Conv2D(3, 5, 1, padding=0).output_shape((2, 3, 9, 9)) == (2, 5, 9, 9)
        with pytest.raises(ShapeError):
            Conv2D(3, 5, 3).output_shape((2, 4, 9, 9))


class TestPoolingAndNorm:
    """Max pooling and batch normalisation behaviour."""

    def test_max_pool_values(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = max_pool2d(Tensor(x), 2, 2).data
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_max_pool_drops_odd_edge(self):
        assert MaxPool2D(2, 2).output_shape((1, 3, 5, 7)) == (1, 3, 2, 3)
        assert max_pool2d(Tensor(np.ones((1, 3, 5, 7))), 2, 2).shape == (1, 3, 2, 3)

    def test_max_pool_gradient_goes_to_first_max(self, float64):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        max_pool2d(x, 2, 2).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_batch_norm_training_normalises(self, rng):
        bn = BatchNorm2D(3)
        x = Tensor(rng.normal(5.0, 3.0, size=(8, 3, 4, 4)))
        out = bn(x).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
        assert (bn.running_mean > 0.1).all()

    def test_batch_norm_eval_uses_running_stats(self, rng):
        bn = BatchNorm2D(2).eval()
        x = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + 1e-5), rtol=1e-5)

    def test_batch_norm_training_needs_two_samples(self):
        with pytest.raises(ShapeError):
            BatchNorm2D(2)(Tensor(np.ones((1, 2, 3, 3))))

    def test_batch_norm_costs_no_macs(self):
        bn = BatchNorm2D(4)
        assert bn.macs((1, 4, 8, 8)) == 0
        assert bn.param_count() == 8


class TestLinear:
    def test_weight_layout_and_costs(self):
        layer = Linear(6, 3)
        assert layer.weight.shape == (6, 3)
        assert layer.param_count() == 21
        assert layer.macs((1, 6)) == 18
        assert Linear(256, 2).macs((1, 256)) == 512

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            Linear(6, 3)(Tensor(np.ones((2, 5))))
