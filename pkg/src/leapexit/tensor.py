"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Every op records its parents and a vector-Jacobian closure on the output
tensor. ``Tensor.backward`` walks the recorded graph once in reverse
topological order and accumulates gradients on leaves that require them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(x):
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return x
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, vjp, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- elementwise arithmetic -----------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), vjp, "div")


def power(x, exponent):
    x = _wrap(x)
    if isinstance(exponent, Tensor):
        raise ContractError("power() supports constant exponents only")
    p = float(exponent)

    def vjp(g):
        return (g * p * x.data ** (p - 1.0),)

    return _result(x.data ** p, (x,), vjp, "pow")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def vjp(g):
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), vjp, "matmul")


# -- reductions and shape ops ----------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    x = _wrap(x)

    def vjp(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / n,)

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), vjp, "mean")


def reshape(x, shape):
    x = _wrap(x)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes=None):
    x = _wrap(x)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(x.data, axes), (x,), vjp, "transpose")


def getitem(x, index):
    x = _wrap(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), vjp, "getitem")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def detach(x):
    """Stop-gradient: same values, no path back to ``x``."""
    x = _wrap(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    out.op = "detach"
    return out


# -- nonlinearities ---------------------------------------------------------

def exp(x):
    x = _wrap(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = _wrap(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    """Square root; the (infinite) derivative at exactly 0 is taken as 0."""
    x = _wrap(x)
    y = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g * 0.5 / safe, 0.0),)

    return _result(y, (x,), vjp, "sqrt")


def tanh(x):
    x = _wrap(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = _wrap(x)
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x):
    x = _wrap(x)
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU."""
    x = _wrap(x)
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    y = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(y, (x,), vjp, "gelu")


def clamp_min(x, floor):
    x = _wrap(x)
    return _result(np.maximum(x.data, floor), (x,), lambda g: (g * (x.data > floor),), "clamp_min")


def clamp_max(x, ceil):
    x = _wrap(x)
    return _result(np.minimum(x.data, ceil), (x,), lambda g: (g * (x.data < ceil),), "clamp_max")


def softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax")


def log_softmax(x, axis=-1):
    x = _wrap(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    y = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _result(y, (x,), vjp, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def vjp(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), vjp, "layer_norm")


# -- embedding-specific ops -------------------------------------------------

def embedding(weight, ids):
    weight = _wrap(weight)
    ids = np.asarray(ids)

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _result(weight.data[ids], (weight,), vjp, "embedding")


def masked_mean(h, mask):
    """Average ``h`` (B, T, d) over positions where ``mask`` (B, T) is true."""
    h = _wrap(h)
    m = np.asarray(mask, dtype=h.data.dtype)
    if m.shape != h.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match hidden {h.shape[:2]}")
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise DegenerateInputError("mean pooling over an empty mask row")
    w = (m / counts)[..., None]

    def vjp(g):
        return (g[:, None, :] * w,)

    return _result((h.data * w).sum(axis=1), (h,), vjp, "masked_mean")


def norm(x, axis=-1):
    """L2 norm along ``axis``; gradient is zero where the norm is zero."""
    x = _wrap(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(scale, axis),)

    return _result(n, (x,), vjp, "norm")


def normalize(x, axis=-1):
    x = _wrap(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    y = x.data / n

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)

    return _result(y, (x,), vjp, "normalize")


def cosine(a, b, axis=-1):
    """Cosine similarity along ``axis`` (row-wise for matrices)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine operands differ in shape: {a.shape} vs {b.shape}")
    na = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b.data * b.data, axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine of a zero-norm vector")
    c = np.sum(a.data * b.data, axis=axis, keepdims=True) / (na * nb)

    def vjp(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga, gb

    return _result(np.squeeze(c, axis=axis), (a, b), vjp, "cosine")


# -- verification helper ----------------------------------------------------

def gradcheck(fn, params, eps=1e-5, floor=1e-6):
    """Max elementwise relative error between analytic and central-difference gradients.

    ``fn`` takes no arguments and returns a scalar Tensor built from ``params``.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            for i in np.ndindex(p.data.shape):
                old = p.data[i]
                p.data[i] = old + eps
                up = fn().item()
                p.data[i] = old - eps
                down = fn().item()
                p.data[i] = old
                num = (up - down) / (2 * eps)
                err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), floor)
                worst = max(worst, err)
    return worst
