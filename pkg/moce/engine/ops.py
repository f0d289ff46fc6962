import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from .tensor import ComputationTape, Tensor
from ..utils.exceptions import ContractError, ShapeError

ArrayLike = Union[Tensor, np.ndarray, float, int]

ACTIVATIONS = ("gelu", "relu", "silu")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(op: str, inputs: Tuple[Tensor, ...], data: np.ndarray, backward_rule) -> Tensor:
    """Wrap ``data`` and record it on the active tape when any input needs a gradient."""
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=requires_grad)
    if requires_grad:
        tape = ComputationTape.active()
        if tape is not None:
            tape.record(op, inputs, out, backward_rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", (a, b), a.data + b.data, rule)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", (a, b), a.data - b.data, rule)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", (a, b), a.data * b.data, rule)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    quotient = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * quotient / b.data, b.shape)

    return _result("div", (a, b), quotient, rule)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


# Linear algebra and layout

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", (a, b), a.data @ b.data, rule)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    return _result("reshape", (a,), a.data.reshape(shape).copy(), lambda g: (g.reshape(a.shape),))


def take_rows(a: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Gather rows of a matrix; repeated indices accumulate in backward."""
    a = as_tensor(a)
    index = np.asarray(indices, dtype=np.int64)
    if index.ndim != 1 or index.size == 0:
        raise ShapeError(f"take_rows: indices must be a non-empty 1-D list, got shape {index.shape}")
    if index.min() < 0 or index.max() >= a.shape[0]:
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")

    def rule(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("take_rows", (a,), a.data[index], rule)


def scatter_rows(values: ArrayLike, indices: Sequence[int], n_rows: int) -> Tensor:
    """Place ``values`` rows at ``indices`` of an ``n_rows``-row zero matrix (summing duplicates)."""
    values = as_tensor(values)
    index = np.asarray(indices, dtype=np.int64)
    if index.ndim != 1 or index.size != values.shape[0]:
        raise ShapeError(f"scatter_rows: {index.size} indices for values of shape {values.shape}")
    if index.min() < 0 or index.max() >= n_rows:
        raise ShapeError(f"scatter_rows: index out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, index, values.data)
    return _result("scatter_rows", (values,), out, lambda g: (g[index],))


def slice_cols(a: ArrayLike, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: invalid column range [{start}, {stop}) for shape {a.shape}")

    def rule(g):
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_cols", (a,), a.data[:, start:stop].copy(), rule)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", parts, data, rule)


# Reductions

def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), rule)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# Nonlinearities

def softmax(v: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {v.shape}")
    shifted = v.data - np.max(v.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / np.sum(exps, axis=axis, keepdims=True)

    def rule(g):
        return (probs * (g - np.sum(g * probs, axis=axis, keepdims=True)),)

    return _result("softmax", (v,), probs, rule)


def activation(v: ArrayLike, kind: str = "gelu") -> Tensor:
    """Elementwise GELU (exact erf form), ReLU or SiLU."""
    v = as_tensor(v)
    x = v.data
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * cdf
        local = cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
    elif kind == "relu":
        out = np.maximum(x, 0.0)
        local = (x > 0).astype(np.float64)
    elif kind == "silu":
        sig = expit(x)
        out = x * sig
        local = sig * (1.0 + x * (1.0 - sig))
    else:
        raise ContractError(f"Unknown activation '{kind}', expected one of {ACTIVATIONS}")
    return _result(kind, (v,), out, lambda g: (g * local,))


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization of a T×d matrix."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: input {x.shape} with gamma {gamma.shape} and beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g):
        g_normed = g * gamma.data
        g_x = inv_std * (
            g_normed
            - g_normed.mean(axis=1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=1, keepdims=True)
        )
        return g_x, (g * normed).sum(axis=0), g.sum(axis=0)

    return _result("layer_norm", (x, gamma, beta), normed * gamma.data + beta.data, rule)


def cross_entropy(logits: ArrayLike, targets: Sequence[int], mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the rows selected by ``mask``."""
    logits = as_tensor(logits)
    target = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} with targets {target.shape}")
    if target.min() < 0 or target.max() >= logits.shape[1]:
        raise ContractError(f"cross_entropy: target id out of range for {logits.shape[1]} classes")
    weight = np.ones(target.size) if mask is None else np.asarray(mask, dtype=np.float64)
    if weight.shape != target.shape:
        raise ShapeError(f"cross_entropy: mask shape {weight.shape} does not match targets {target.shape}")
    count = weight.sum()
    if count <= 0:
        raise ContractError("cross_entropy: no supervised positions")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(target.size)
    nll = -(log_probs[rows, target] * weight).sum() / count

    def rule(g):
        grad = np.exp(log_probs)
        grad[rows, target] -= 1.0
        return (grad * (weight / count)[:, None] * g,)

    return _result("cross_entropy", (logits,), np.array(nll), rule)
