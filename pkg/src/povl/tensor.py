"""A small reverse-mode autodiff tensor on top of numpy.

Only the operations the transformer needs are implemented.  Each op records a
closure that pushes the output gradient to its parents; ``backward`` walks the
graph in reverse topological order.  Everything is float64.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class UsageError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_leaf")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name
        self._leaf = True

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        out._leaf = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that was not recorded with gradients")
        if not self._leaf and self._backward is None:
            raise UsageError("graph already released; run the forward pass again")
        order, seen = [], set()
        stack = [(self, False)]
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
        g0 = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        grads = {id(self): g0}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg
            node._parents = ()
            node._backward = None

    # -- elementwise -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x / y, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * x / (y * y), y.shape)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape

        basic = all(isinstance(i, (int, slice, type(Ellipsis)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)
        return Tensor._make(self.data[idx], (self,), back)

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1 - y * y),))

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2 * g * x,))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inv),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)
    return Tensor._make(x @ y, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b with x of shape (..., n_in) and w of shape (n_in, n_out)."""
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, back)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts,
                        lambda g: tuple(np.split(g, cuts, axis=axis)))


def attention_bias(mask: np.ndarray) -> np.ndarray:
    """Additive 0 / -inf bias from a boolean keep-mask; rejects fully masked rows."""
    mask = np.asarray(mask, bool)
    if not mask.any(axis=-1).all():
        raise NumericError("attention row with every key masked")
    return np.where(mask, 0.0, -np.inf)


def masked_softmax(scores: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get exactly 0.

    ``mask`` is a boolean keep-mask or a float bias from :func:`attention_bias`.
    """
    s = scores.data
    if mask is not None:
        bias = mask if mask.dtype.kind == "f" else attention_bias(mask)
        s = s + bias
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    p = e

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return Tensor._make(p, (scores,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data
    n = xd.shape[-1]

    def back(g):
        gxh = g * gain.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return gx, (g2 * xh.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)
    return Tensor._make(out, (x, gain, bias), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU; smooth, so finite differences stay exact."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1 + t)

    def back(g):
        du = _GELU_C * (1 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * du),)
    return Tensor._make(out, (x,), back)


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations in {where}")
    return t


class Adam:
    """Adam with bias correction, operating in place on numpy arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: Optional[float] = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            p = p.data if isinstance(p, Tensor) else p
            if p.shape != g.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params: dict, grads: dict, lr: float = 1e-4, state: Optional[Adam] = None) -> Adam:
    """Functional wrapper: one Adam update, returning the (possibly new) state."""
    state = state or Adam(lr=lr)
    state.lr = lr
    state.step(params, grads)
    return state
