"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. When gradient recording is enabled and any
input requires a gradient, each operation attaches a Node holding its
inputs and a backward rule; `Tensor.backward()` walks the resulting graph
once in reverse topological order and accumulates gradients (sum) into
every reachable tensor that requires one. The graph is released after the
walk unless `retain_graph=True`.

Gradient recording and the default float precision are thread-local, so
independent models can run on separate threads.
"""

from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union
import threading

import numpy as np

from .errors import LightTBNetError, ShapeError
from .utils import logger

_state = threading.local()

_SUPPORTED_DTYPES = (np.float32, np.float64)

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def is_grad_enabled() -> bool:
    """Whether operations currently record a graph on this thread."""
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    """Float type used for newly created tensors on this thread."""
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    """Set the float type for new tensors (float32, or float64 for verification)."""
    dtype = np.dtype(dtype).type
    if dtype not in _SUPPORTED_DTYPES:
        raise LightTBNetError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def no_grad() -> Iterator[None]:
    """Inference mode: operations inside the block record no graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype, e.g. `with precision(np.float64):`."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Node:
    """One recorded operation: its inputs and the rule producing their gradients."""
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, inputs={len(self.inputs)})"


class Graph:
    """
    Recorded computation reachable from an output tensor.

    `order` lists tensors so that every tensor appears after all of its
    inputs; reversing it gives a valid order for the backward walk.
    """

    def __init__(self, output: "Tensor"):
        self.output = output
        self.order = self._topological_order(output)

    @staticmethod
    def _topological_order(root: "Tensor") -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        # iterative post-order DFS
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            node = tensor._node
            if node is not None:
                for inp in node.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    @property
    def nodes(self) -> List[Node]:
        """Recorded operations in execution-compatible order."""
        return [t._node for t in self.order if t._node is not None]

    def release(self) -> None:
        """Drop backward rules so intermediate buffers can be freed."""
        for tensor in self.order:
            tensor._node = None


class Tensor:
    """n-dimensional float array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data: np.ndarray = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        """Wrap an op result without copying."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """
        Accumulate d(self)/d(t) into `t.grad` for every reachable tensor t
        that requires a gradient.

        Gradients are summed into existing `.grad` arrays; callers reset them
        between optimisation steps. Without `retain_graph` the graph is
        released, so a second call on the same output is a no-op for the
        released part.
        """
        if self.ndim != 0:
            raise ShapeError(f"backward() needs a rank-0 loss, got shape {self.shape}", {"shape": list(self.shape)})
        if not self.requires_grad:
            raise LightTBNetError("backward() called on a tensor that does not require grad")

        graph = Graph(self)
        pending = {id(self): np.ones_like(self.data)}
        for tensor in reversed(graph.order):
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            node = tensor._node
            if node is None:
                continue
            for inp, ig in zip(node.inputs, node.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = ig if key not in pending else pending[key] + ig

        if not retain_graph:
            graph.release()

    # -- operators ----------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def log(self): return log(self)
    def exp(self): return exp(self)
    def relu(self): return relu(self)
    def clamp(self, low: float, high: float): return clamp(self, low, high)
    def softmax(self, axis: int = 1): return softmax(self, axis)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """
    Wrap an op result and, when recording, attach its backward rule.

    `backward_fn(g)` must return one gradient (or None) per input.
    """
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Coerce numbers and arrays to a constant Tensor (dtype follows `like`)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(value, dtype=dtype or get_default_dtype()))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(
        f"{op}: shape mismatch {a.shape} vs {b.shape} (only rank-0 operands broadcast)",
        {"op": op, "a": list(a.shape), "b": list(b.shape)},
    )


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "add")
    return record_op(a.data + b.data, (a, b),
                     lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "sub")
    return record_op(a.data - b.data, (a, b),
                     lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "mul")
    return record_op(a.data * b.data, (a, b),
                     lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_elementwise(a, b, "div")

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return record_op(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent."""
    exponent = float(exponent)

    def backward(g):
        if exponent == 0.0:
            return (np.zeros_like(a.data),)
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return record_op(np.power(a.data, exponent).astype(a.dtype, copy=False), (a,), backward, "pow")


def log(a: Tensor) -> Tensor:
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip to [low, high]; the gradient is passed only inside the interval."""
    inside = (a.data >= low) & (a.data <= high)
    out = np.clip(a.data, low, high).astype(a.dtype, copy=False)
    return record_op(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ---------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(tensor_sum(a, axis, keepdims), float(count))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}", {"from": list(a.shape), "to": list(shape)})
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis`; all other dimensions must agree."""
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ShapeError(
                f"concat: shapes {ref} and {t.shape} differ outside axis {axis}",
                {"a": list(ref), "b": list(t.shape), "axis": axis},
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(out, tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [M,K] and [K,P]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}",
                         {"a": list(a.shape), "b": list(b.shape)})
    return record_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# -- classification helpers ---------------------------------------------------------

def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record_op(s, (a,), backward, "softmax")


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select a[r, index[r]] for every row r of a [B, C] tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: need [B,C] and [B] indices, got {a.shape} and {index.shape}",
                         {"a": list(a.shape), "index": list(index.shape)})
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return record_op(a.data[rows, index], (a,), backward, "pick")


# -- verification -----------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4, floor: float = 1e-6) -> float:
    """
    Compare autodiff gradients with central finite differences.

    `fn` must rebuild its scalar output from `inputs` on every call. Inputs
    are perturbed in place one scalar at a time. Returns the maximum
    elementwise relative error |a - n| / max(|a|, |n|, floor).
    Use 64-bit mode for meaningful results.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            if not np.shares_memory(flat, tensor.data):
                raise LightTBNetError("gradcheck needs contiguous input tensors")
            grad_flat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = float(fn().data)
                flat[i] = original - h
                minus = float(fn().data)
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                exact = float(grad_flat[i])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, err)
    logger.debug(f"gradcheck over {len(inputs)} tensors: max rel err {worst:.3e}")
    return worst
