"""Neural-network layers built on the autodiff tensor.

Layers follow NCHW layout. Every layer knows its parameter count, its
output shape for a given input shape and its multiply-accumulate count,
which is what the efficiency bench reads.

MAC convention: one MAC is one multiply plus one add. Convolutions count
C_in*k_h*k_w*C_out*H_out*W_out, linear layers in*out; bias adds,
BatchNorm, ReLU and pooling count zero.
"""

from typing import Dict, Iterator, List, Optional, Tuple, Union
import math

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, concat, record_op, relu, softmax
from .utils import logger

Shape = Tuple[int, ...]


# -- kernels ------------------------------------------------------------------------

def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation (no kernel flip) with zero padding.

    Computed as a sum over kernel offsets of [B,C,H',W'] x [O,C] products,
    which keeps memory at the size of the output.
    """
    B, C, H, W = x.shape
    O, C_w, kh, kw = weight.shape
    if C != C_w:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {C_w}",
                         {"input": list(x.shape), "weight": list(weight.shape)})
    out_h = _conv_out_size(H, kh, stride, padding)
    out_w = _conv_out_size(W, kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: output size would be {out_h}x{out_w}",
                         {"input": list(x.shape), "kernel": [kh, kw], "output": [B, O, out_h, out_w]})

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1

    acc = np.zeros((B, out_h, out_w, O), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            acc += np.tensordot(patch, weight.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        grad_w = np.empty_like(weight.data)
        grad_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                grad_w[:, :, i, j] = np.tensordot(gt, patch, axes=([0, 1, 2], [0, 2, 3]))
                grad_xp[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                    np.tensordot(gt, weight.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, padding:padding + H, padding:padding + W] if padding else grad_xp
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(out, inputs, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """
    Max pooling; trailing rows/columns that do not fill a window are dropped.

    The gradient goes to the first maximum of each window in row-major order.
    """
    B, C, H, W = x.shape
    if size > H or size > W:
        raise ShapeError(f"max_pool2d: pool {size} larger than input {H}x{W}", {"input": list(x.shape), "pool": size})
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    flat = windows.reshape(B, C, out_h, out_w, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    # Flat input index of each window's argmax
    rows = np.arange(out_h).reshape(1, 1, out_h, 1) * stride + arg // size
    cols = np.arange(out_w).reshape(1, 1, 1, out_w) * stride + arg % size
    plane = (np.arange(B).reshape(B, 1, 1, 1) * C + np.arange(C).reshape(1, C, 1, 1)) * (H * W)
    src = (plane + rows * W + cols).reshape(-1)

    def backward(g):
        grad = np.bincount(src, weights=g.reshape(-1), minlength=x.size)
        return (grad.astype(x.dtype, copy=False).reshape(x.shape),)

    return record_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Per-channel batch normalisation over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (biased variance normalises, unbiased variance feeds
    the running estimate). In eval mode the running buffers are used as is.
    """
    B, C, H, W = x.shape
    if training and B < 2:
        raise ShapeError("batch_norm: training mode needs a batch of at least 2", {"input": list(x.shape)})
    shape = (1, C, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        n = B * H * W
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data.reshape(shape)
        if training:
            n = B * H * W
            grad_x = (inv_std.reshape(shape) / n) * (
                n * gx
                - gx.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_x = gx * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return record_op(out, (x, gamma, beta), backward, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """y = x @ W + b for x [B, in] and W [in, out]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}",
                         {"input": list(x.shape), "weight": list(weight.shape)})
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grad_b = g.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, x.data.T @ g, grad_b

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(out, inputs, backward, "linear")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two NCHW tensors along channels, a's channels first."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} differ in B, H or W",
                         {"a": list(a.shape), "b": list(b.shape)})
    return concat([a, b], axis=1)


# -- modules ------------------------------------------------------------------------

def _kaiming_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, dtype) -> np.ndarray:
    # ReLU gain sqrt(2): bound = sqrt(2) * sqrt(3 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: named parameters, buffers, children and train/eval mode."""

    def __init__(self):
        self.training = True
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def register_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """Parameters in registration order, children after own parameters."""
        for name, tensor in self._params.items():
            yield f"{prefix}{name}", tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in self._buffers.items():
            yield f"{prefix}{name}", array
        for child_name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def macs(self, input_shape: Shape) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2D(Module):
    """Convolution layer; padding is an int or "same" (odd kernels, stride 1)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Union[int, Tuple[int, int]] = 3,
                 stride: int = 1, padding: Union[int, str] = "same", rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding == "same":
            if kh != kw or kh % 2 == 0 or stride != 1:
                raise ShapeError(f"'same' padding needs an odd square kernel and stride 1, got {kh}x{kw}/{stride}")
            padding = (kh - 1) // 2
        elif padding == "valid":
            padding = 0
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = int(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.weight = self.register_parameter(
            "weight", Tensor._wrap(_kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)))
        self.bias = self.register_parameter("bias", Tensor._wrap(np.zeros(out_channels, dtype=dtype)))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, input_shape: Shape) -> Shape:
        B, C, H, W = input_shape
        if C != self.in_channels:
            raise ShapeError(f"Conv2D expects {self.in_channels} channels, got {C}", {"input": list(input_shape)})
        out_h = _conv_out_size(H, self.kernel[0], self.stride, self.padding)
        out_w = _conv_out_size(W, self.kernel[1], self.stride, self.padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"Conv2D output size would be {out_h}x{out_w}", {"input": list(input_shape)})
        return (B, self.out_channels, out_h, out_w)

    def macs(self, input_shape: Shape) -> int:
        _, C_out, H_out, W_out = self.output_shape(input_shape)
        return self.in_channels * self.kernel[0] * self.kernel[1] * C_out * H_out * W_out


class BatchNorm2D(Module):
    """Batch normalisation with running statistics (momentum 0.1, eps 1e-5)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.register_parameter("gamma", Tensor._wrap(np.ones(channels, dtype=dtype)))
        self.beta = self.register_parameter("beta", Tensor._wrap(np.zeros(channels, dtype=dtype)))
        self.running_mean = self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2D expects [B,{self.channels},H,W], got {x.shape}", {"input": list(x.shape)})
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class MaxPool2D(Module):
    def __init__(self, size: int = 2, stride: int = 2):
        super().__init__()
        self.size = size
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return max_pool2d(x, self.size, self.stride)

    def output_shape(self, input_shape: Shape) -> Shape:
        B, C, H, W = input_shape
        if self.size > H or self.size > W:
            raise ShapeError(f"MaxPool2D window {self.size} larger than {H}x{W}", {"input": list(input_shape)})
        return (B, C, (H - self.size) // self.stride + 1, (W - self.size) // self.stride + 1)


class Linear(Module):
    """Fully-connected layer with weight [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = self.register_parameter(
            "weight", Tensor._wrap(_kaiming_uniform(rng, (in_features, out_features), in_features, dtype)))
        self.bias = self.register_parameter("bias", Tensor._wrap(np.zeros(out_features, dtype=dtype)))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 2 or input_shape[1] != self.in_features:
            raise ShapeError(f"Linear expects [B,{self.in_features}], got {tuple(input_shape)}",
                             {"input": list(input_shape)})
        return (input_shape[0], self.out_features)

    def macs(self, input_shape: Shape) -> int:
        self.output_shape(input_shape)
        return self.in_features * self.out_features


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Softmax(Module):
    def __init__(self, axis: int = 1):
        super().__init__()
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return softmax(x, self.axis)


logger.debug("Layer kernels registered: conv2d, max_pool2d, batch_norm, linear")
