"""
Numerical core
─────────────────────────────────────────────────────────────────────────────
Dense float64 tensors with reverse-mode differentiation, the three layer
types the detectors are built from (affine map, LSTM cell, dilated causal
convolution), the training losses, and two optimizers.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients. backward() walks that record in reverse
topological order. The record lives on the tensors themselves, so separate
models never share mutable state; recording can be switched off per thread
with no_grad() for scoring passes.
"""
from __future__ import annotations

import math
import threading
import zlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from app.errors import ContractError, DimensionError, NumericError

_LOG2 = math.log(2.0)
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # ndarray <op> Tensor defers to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False) -> Tensor:
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── Elementwise ops ───────────────────────────────────────────────────────────

def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Any, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _result(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * a.data)),))


def abs_(a: Any) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def logcosh(a: Any) -> Tensor:
    a = as_tensor(a)
    magnitude = np.abs(a.data)
    out = magnitude + np.log1p(np.exp(-2.0 * magnitude)) - _LOG2
    return _result(out, (a,), lambda g: (g * np.tanh(a.data),))


# ── Linear algebra and reductions ────────────────────────────────────────────

def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if a.ndim == 1:
            return g @ np.swapaxes(b.data, -1, -2), np.outer(a.data, g)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),),
    )


def mean(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.size(out), 1)
    return _result(out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def max_(a: Any, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.max(a.data, axis=axis, keepdims=True)
    winners = (a.data == out).astype(np.float64)
    winners /= winners.sum(axis=axis, keepdims=True)
    value = out if keepdims else np.squeeze(out, axis=axis)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * winners,)

    return _result(value, (a,), backward)


# ── Shape ops ────────────────────────────────────────────────────────────────

def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Any, index: Any) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros(a.shape)
        if _basic_index(index):
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    return _result(
        np.stack([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(parts))),
    )


def flip(a: Any, axis: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def repeat(a: Any, repeats: int, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        split_shape = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1 :]
        return (g.reshape(split_shape).sum(axis=axis + 1),)

    return _result(np.repeat(a.data, repeats, axis=axis), (a,), backward)


# ── Layers ───────────────────────────────────────────────────────────────────

def linear_forward(x: Any, W: Tensor, b: Tensor) -> Tensor:
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"linear_forward: x {x.shape} does not conform to W {W.shape} / b {b.shape}")
    return add(matmul(x, W), b)


@dataclass(frozen=True)
class LstmWeights:
    """Gate weights in i, f, g, o order along the last axis."""

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]


def lstm_cell_step(x: Any, h: Any, c: Any, params: LstmWeights) -> tuple[Tensor, Tensor]:
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = params.hidden_size
    if x.shape[-1] != params.w_x.shape[0] or h.shape[-1] != hidden or c.shape != h.shape:
        raise DimensionError(
            f"lstm_cell_step: x {x.shape}, h {h.shape}, c {c.shape} do not conform to "
            f"w_x {params.w_x.shape}, w_h {params.w_h.shape}"
        )
    if not np.all(np.isfinite(x.data)):
        raise NumericError("lstm_cell_step received a non-finite input")
    z = matmul(x, params.w_x) + matmul(h, params.w_h) + params.b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_next = f * c + i * g
    return o * tanh(c_next), c_next


def lstm_sequence(
    xs: Tensor,
    params: LstmWeights,
    state: tuple[Tensor, Tensor] | None = None,
) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
    """Run one LSTM layer over axis -2 of an (N, T, D) tensor."""
    batch = xs.shape[:-2]
    if state is None:
        zeros = Tensor(np.zeros(batch + (params.hidden_size,)))
        state = (zeros, zeros)
    h, c = state
    outputs: list[Tensor] = []
    for t in range(xs.shape[-2]):
        h, c = lstm_cell_step(xs[..., t, :], h, c, params)
        outputs.append(h)
    return outputs, (h, c)


def dilated_causal_conv1d(
    x: Any,
    kernel: Tensor,
    dilation: int = 1,
    bias: Tensor | None = None,
    padding: int | None = None,
) -> Tensor:
    """Causal convolution along axis -2 of (..., T, Din).

    kernel[j] weighs the input lagged by j * dilation steps, so kernel[0] is the
    current step. Left padding defaults to (k - 1) * dilation zeros, which keeps
    the output length at T.
    """
    x = as_tensor(x)
    if dilation < 1:
        raise ContractError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv kernel {kernel.shape} does not conform to input {x.shape}")
    taps, d_in, d_out = kernel.shape
    span = (taps - 1) * dilation
    pad = span if padding is None else padding
    length = x.shape[-2] + pad - span
    if length < 1:
        raise DimensionError(
            f"conv kernel spanning {span + 1} steps is wider than padded input of length {x.shape[-2] + pad}"
        )
    pad_width = [(0, 0)] * x.ndim
    pad_width[-2] = (pad, 0)
    xpad = np.pad(x.data, pad_width)
    starts = [span - j * dilation for j in range(taps)]
    out = np.zeros(x.shape[:-2] + (length, d_out))
    for j, start in enumerate(starts):
        out += xpad[..., start : start + length, :] @ kernel.data[j]
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += bias.data
        parents = parents + (bias,)

    def backward(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        gx_pad = np.zeros(xpad.shape)
        gk = np.zeros(kernel.shape)
        flat_g = g.reshape(-1, d_out)
        for j, start in enumerate(starts):
            window = xpad[..., start : start + length, :]
            gx_pad[..., start : start + length, :] += g @ kernel.data[j].T
            gk[j] = window.reshape(-1, d_in).T @ flat_g
        grads: tuple[np.ndarray | None, ...] = (gx_pad[..., pad:, :], gk)
        if bias is not None:
            grads = grads + (flat_g.sum(axis=0),)
        return grads

    return _result(out, parents, backward)


# ── Losses ───────────────────────────────────────────────────────────────────

class LossKind(str, Enum):
    MSE = "mse"
    MAE = "mae"
    LOGCOSH = "logcosh"


def loss(pred: Tensor, target: Any, kind: LossKind | str = LossKind.MSE) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} and target {target.shape} differ")
    error = pred - target
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        return mean(error * error)
    if kind is LossKind.MAE:
        return mean(abs_(error))
    return mean(logcosh(error))


# ── Differentiation ──────────────────────────────────────────────────────────

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss_value: Tensor, params: ParamStore | Mapping[str, Tensor] | None = None) -> None:
    if loss_value.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_value.shape}")
    pending: dict[int, np.ndarray] = {id(loss_value): np.ones(loss_value.shape)}
    for node in reversed(_topological_order(loss_value)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    if params is not None:
        for tensor in _iter_params(params):
            if tensor.grad is None:
                tensor.grad = np.zeros(tensor.shape)


# ── Parameters ───────────────────────────────────────────────────────────────

class ParamStore:
    """Named parameters drawn from a per-name counter-based stream.

    Each parameter's initial values depend only on (seed, name), so two stores
    built from the same DetectorSpec and seed are identical regardless of build order.
    """

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ContractError(f"seed must be unsigned, got {seed}")
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def stream(self, name: str) -> np.random.Generator:
        key = (self.seed << 32) | zlib.crc32(name.encode("utf-8"))
        return np.random.Generator(np.random.Philox(key=key))

    def add(self, name: str, values: Any) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor = Tensor(values, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        return self.add(name, self.stream(name).uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: tuple[int, ...], value: float = 0.0) -> Tensor:
        return self.add(name, np.full(shape, float(value)))

    def linear(self, name: str, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
        return (
            self.uniform(f"{name}.W", (d_in, d_out), fan_in=d_in),
            self.uniform(f"{name}.b", (d_out,), fan_in=d_in),
        )

    def lstm(self, name: str, d_in: int, hidden: int) -> LstmWeights:
        fan_in = d_in + hidden
        bias = self.stream(f"{name}.b").uniform(-1.0, 1.0, size=4 * hidden) / math.sqrt(fan_in)
        bias[hidden : 2 * hidden] = 1.0
        return LstmWeights(
            w_x=self.uniform(f"{name}.w_x", (d_in, 4 * hidden), fan_in=fan_in),
            w_h=self.uniform(f"{name}.w_h", (hidden, 4 * hidden), fan_in=fan_in),
            b=self.add(f"{name}.b", bias),
        )

    def conv(self, name: str, taps: int, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
        fan_in = taps * d_in
        return (
            self.uniform(f"{name}.kernel", (taps, d_in, d_out), fan_in=fan_in),
            self.uniform(f"{name}.bias", (d_out,), fan_in=fan_in),
        )

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def subset(self, prefixes: Sequence[str]) -> dict[str, Tensor]:
        return {name: t for name, t in self._params.items() if name.startswith(tuple(prefixes))}

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, values in arrays.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter {name!r}")
            if self._params[name].shape != np.shape(values):
                raise DimensionError(
                    f"parameter {name!r} has shape {self._params[name].shape}, got {np.shape(values)}"
                )
            self._params[name].data = np.array(values, dtype=np.float64)


def _iter_params(params: ParamStore | Mapping[str, Tensor]) -> Iterator[Tensor]:
    if isinstance(params, ParamStore):
        return (t for _, t in params.items())
    return iter(params.values())


def _named(params: ParamStore | Mapping[str, Tensor]) -> list[tuple[str, Tensor]]:
    return params.items() if isinstance(params, ParamStore) else list(params.items())


def clip_grad_norm(params: ParamStore | Mapping[str, Tensor], max_norm: float = 5.0) -> float:
    grads = [t.grad for t in _iter_params(params) if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# ── Optimizers ───────────────────────────────────────────────────────────────

class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimState:
    kind: OptimizerKind
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer(
    kind: OptimizerKind | str,
    learning_rate: float,
    params: ParamStore | Mapping[str, Tensor],
    **hyper: float,
) -> OptimState:
    state = OptimState(kind=OptimizerKind(kind), learning_rate=learning_rate, **hyper)
    if state.kind is OptimizerKind.ADAM:
        for name, tensor in _named(params):
            state.first[name] = np.zeros(tensor.shape)
            state.second[name] = np.zeros(tensor.shape)
    return state


def optimizer_step(state: OptimState, params: ParamStore | Mapping[str, Tensor]) -> None:
    named = _named(params)
    for name, tensor in named:
        if tensor.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward() first")
    state.step += 1
    lr = state.learning_rate
    if state.kind is OptimizerKind.SGD:
        for _, tensor in named:
            tensor.data -= lr * tensor.grad
        return
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, tensor in named:
        g = tensor.grad
        m = state.first[name]
        v = state.second[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
