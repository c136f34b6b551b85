"""Minimal reverse-mode differentiable tensor arithmetic on top of numpy.

Only the operations the quality model needs are provided. Every op records a
closure mapping the output gradient to the gradients of its inputs; graph
recording is skipped when no input requires a gradient, so inference over a
frozen model costs plain numpy.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from modiqa import kernels

LAYER_NORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class OracleError(RuntimeError):
    """The finite-difference oracle could not be evaluated reliably."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional array that may take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable leaf tensor with an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name="", dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class ParameterStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self, named_params=()):
        self._params = OrderedDict()
        for name, p in named_params:
            self.add(name, p)

    def add(self, name, param):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if param.grad.shape != param.data.shape:
            raise DimensionError(f"gradient shape {param.grad.shape} != value shape {param.data.shape} for {name}")
        param.name = name
        self._params[name] = param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    @property
    def total_count(self):
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {p.data.shape}")
            p.data[...] = value


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def tabs(a):
    """Elementwise absolute value; subgradient 0 at 0."""
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    # tanh is already exactly +-1 in float64 well before |x| = 20; clipping keeps x**3 finite
    xc = np.clip(x, -20.0, 20.0)
    inner = _GELU_C * (xc + 0.044715 * xc**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xc * xc)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


activation = gelu


def matmul(a, b):
    a, b = _binary_operands(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def affine(x, W, b=None):
    """``x @ W + b`` broadcast over the leading axes of ``x``."""
    x = as_tensor(x, dtype=W.dtype)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} incompatible with weight shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, W.shape[1])

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def take_rows(table, idx):
    """Gather rows ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[idx], (table,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def broadcast_to(a, shape):
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def softmax(v, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    v = as_tensor(v)
    z = v.data - np.max(v.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (v,), backward)


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x = as_tensor(x, dtype=gamma.dtype)
    n = x.shape[-1]
    if n < 2:
        raise ContractError("layer_norm needs at least 2 features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def pairwise_rank_sum(pred, target, eps):
    """Sum of pairwise ranking losses over all pairs of a 1-D prediction vector.

    ``target`` is treated as a constant. Uses the compiled kernel when built.
    """
    target = np.asarray(target, dtype=np.float64)
    total, grad = kernels.pairwise_rank(pred.data, target, eps)

    def backward(g):
        return ((g * grad).astype(pred.dtype),)

    return _make(np.asarray(total, dtype=pred.dtype), (pred,), backward)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, store=None):
    """Accumulate d(loss)/d(parameter) into ``Parameter.grad``.

    ``store`` is accepted for symmetry with the training code; gradients reach
    every parameter in the graph regardless.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_gradient(f, store, h=1e-5, names=None):
    """Central-difference estimate of d f / d parameter for every scalar.

    ``f`` is called with no arguments and must return a float computed from the
    current parameter values. Returns ``{name: ndarray}``.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    base1, base2 = float(f()), float(f())
    if base1 != base2:
        raise OracleError(f"objective is not deterministic: {base1!r} != {base2!r}")
    out = OrderedDict()
    for name, p in store.items():
        if names is not None and name not in names:
            continue
        est = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        g = est.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out[name] = est
    return out
