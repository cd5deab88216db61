import logging
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.core.errors import ConfigError, DimensionError, SymbolIndexError, UsageError

logger = logging.getLogger(__name__)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Float64 array with an optional gradient. Broadcasting is limited to same-rank operands
    whose mismatched axes have length 1, plus 0-d scalars.
    """
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations; nodes are appended in execution (topological) order.

    Tapes nest per thread; ops record on the innermost one when an operand requires a gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, output: Tensor, inputs: tuple, backward_fn):
        self.nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, root: Tensor):
        if root.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {list(root.shape)}")

        grads = {id(root): np.ones_like(root.data)}
        refs = {id(root): root}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            refs.pop(id(node.output), None)
            for tensor, input_grad in zip(node.inputs, node.backward_fn(g)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad
                    refs[key] = tensor

        # Whatever is left was never produced by a recorded node: a leaf.
        for key, g in grads.items():
            leaf = refs[key]
            if not leaf.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, root: Tensor):
    tape.backward(root)


def _make(data, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if b.ndim == 0:
        return a.shape
    if a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)):
        return tuple(y if x == 1 else x for x, y in zip(a.shape, b.shape))
    raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    return _make(y, (x,), lambda g: (g * expit(x.data),))


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "softplus": softplus,
          "relu": relu, "log": log, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *args) -> Tensor:
    if op in _UNARY and len(args) == 1:
        return _UNARY[op](args[0])
    if op in _BINARY and len(args) == 2:
        return _BINARY[op](*args)
    raise UsageError(f"Unknown elementwise op '{op}' with {len(args)} operand(s)")


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not align")

    def backward_fn(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _make(a.data @ b.data, (a, b), backward_fn)


def _check_axis(x: Tensor, axis: int, op: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {list(x.shape)}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    total = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    weights = e / total
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * weights,))


def concat(*tensors: Tensor, axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat() needs at least one tensor")
    ndim = tensors[0].ndim
    for t in tensors:
        if t.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch {[list(x.shape) for x in tensors]}")
    axis = _check_axis(tensors[0], axis, "concat")
    for t in tensors[1:]:
        if any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {[list(x.shape) for x in tensors]} along axis {axis}")

    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("stack() needs at least one tensor")
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise DimensionError(f"stack: shapes differ ({list(first)} vs {list(t.shape)})")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {list(table.shape)}")
    vocab = table.shape[0]
    for i in ids:
        if not 0 <= int(i) < vocab:
            raise SymbolIndexError(f"Id {int(i)} out of range [0, {vocab})")
    index = np.asarray(list(ids), dtype=np.int64)

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), backward_fn)


@dataclass
class LSTMParams:
    """Gate order along the 4*d_h axis: input, forget, cell, output."""
    w_x: Tensor
    w_h: Tensor
    bias: Tensor


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    d_in, d_h = params.w_x.shape[0], params.w_h.shape[0]
    expected = {
        "x": (d_in,),
        "h_prev": (d_h,),
        "c_prev": (d_h,),
        "w_x": (d_in, 4 * d_h),
        "w_h": (d_h, 4 * d_h),
        "bias": (4 * d_h,),
    }
    found = {"x": x.shape, "h_prev": h_prev.shape, "c_prev": c_prev.shape,
             "w_x": params.w_x.shape, "w_h": params.w_h.shape, "bias": params.bias.shape}
    for label, want in expected.items():
        if tuple(found[label]) != want:
            raise DimensionError(f"lstm_cell: {label} has shape {list(found[label])}, expected {list(want)}")

    gates = add(add(matmul(x, params.w_x), matmul(h_prev, params.w_h)), params.bias)
    i = sigmoid(getitem(gates, slice(0, d_h)))
    f = sigmoid(getitem(gates, slice(d_h, 2 * d_h)))
    g = tanh(getitem(gates, slice(2 * d_h, 3 * d_h)))
    o = sigmoid(getitem(gates, slice(3 * d_h, 4 * d_h)))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def conv1d(signal: Tensor, kernel: Tensor) -> Tensor:
    """Cross-correlation with zero 'same' padding. signal [n, c_in], kernel [k, c_in, c_out]."""
    if kernel.ndim != 3 or signal.ndim != 2:
        raise DimensionError(f"conv1d: signal {list(signal.shape)} / kernel {list(kernel.shape)} have wrong rank")
    width, c_in, _ = kernel.shape
    if width % 2 == 0:
        raise ConfigError(f"conv1d: kernel width must be odd, got {width}")
    if signal.shape[1] != c_in:
        raise DimensionError(f"conv1d: signal channels {signal.shape[1]} != kernel channels {c_in}")

    n = signal.shape[0]
    pad = width // 2
    padded = np.pad(signal.data, ((pad, pad), (0, 0)))
    # windows[t, c, j] == padded[t + j, c]
    windows = sliding_window_view(padded, width, axis=0)
    out = np.einsum("tcj,jco->to", windows, kernel.data)

    def backward_fn(g):
        grad_kernel = np.einsum("tcj,to->jco", windows, g)
        grad_padded = np.zeros_like(padded)
        for j in range(width):
            grad_padded[j:j + n] += g @ kernel.data[j].T
        return grad_padded[pad:pad + n], grad_kernel

    return _make(out, (signal, kernel), backward_fn)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of softplus(z) - y*z, the numerically stable form of BCE on logits."""
    y = Tensor(np.asarray(targets, dtype=np.float64))
    return mean(sub(softplus(logits), mul(y, logits)))


def finite_difference_check(fn: Callable[[], Tensor], tensor: Tensor, indices=None,
                            eps: float = 1e-5, floor: float = 1e-8) -> float:
    """
    Compares tape gradients of scalar fn() w.r.t. `tensor` against central differences.
    Returns the max elementwise relative error over `indices` (all entries by default).
    """
    tensor.grad = None
    with Tape() as tape:
        root = fn()
    tape.backward(root)
    analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad

    positions = range(tensor.size) if indices is None else indices
    worst = 0.0
    for pos in positions:
        idx = np.unravel_index(pos, tensor.shape)
        original = tensor.data[idx]
        tensor.data[idx] = original + eps
        plus = fn().item()
        tensor.data[idx] = original - eps
        minus = fn().item()
        tensor.data[idx] = original
        numeric = (plus - minus) / (2.0 * eps)
        exact = analytic[idx]
        denom = max(abs(exact), abs(numeric), floor)
        worst = max(worst, abs(exact - numeric) / denom)
    tensor.grad = None
    return worst
