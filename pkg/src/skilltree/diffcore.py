"""Small reverse-mode automatic differentiation over 2-D float arrays.

Graphs are built eagerly: every op returns a :class:`Node` holding its value,
and :func:`backward` walks the ancestors of a scalar loss in reverse creation
order. Node ids come from a global counter, so parents always have smaller ids
than their children and the walk order is fixed.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import ContractError, NumericFault

_ids = itertools.count()
_dtype = [np.float32]

LOG_FLOOR = 1e-12


def default_dtype():
    return _dtype[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build new leaves at ``dtype`` (the finite-difference oracle runs in float64)."""
    _dtype.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.pop()


class Node:
    __slots__ = ("id", "op", "parents", "value", "grad", "_back", "trainable", "name")

    def __init__(self, op, value, parents=(), back=None, trainable=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.grad = None
        self._back = back
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x):
    return x if isinstance(x, Node) else const(x)


def param(value, name=None):
    """Leaf that receives a gradient."""
    return Node("input", np.array(value, dtype=default_dtype()), trainable=True, name=name)


def const(value):
    """Leaf treated as a constant (also the stop-gradient operator)."""
    return Node("input", np.array(value, dtype=default_dtype()))


def stop_gradient(node):
    return const(node.value)


def params(arrays):
    """Wrap a name -> array dict into a name -> trainable Node dict."""
    return {k: param(v, name=k) for k, v in arrays.items()}


def collect(nodes, grads):
    """Pick the gradients of ``nodes`` (name -> Node) out of a backward gradient map."""
    return {k: grads[n.id] if n.id in grads else np.zeros_like(n.value) for k, n in nodes.items()}


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_2d(*nodes):
    for n in nodes:
        if n.value.ndim > 2:
            raise ContractError(f"arrays beyond 2-D are not supported (got shape {n.value.shape})")


def add(a, b):
    _check_2d(a, b)
    sa, sb = a.shape, b.shape
    return Node("add", a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    _check_2d(a, b)
    sa, sb = a.shape, b.shape
    return Node("sub", a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    _check_2d(a, b)
    av, bv = a.value, b.value
    return Node("mul", av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c):
    c = float(c)
    return Node("scale", a.value * a.value.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return Node("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    return Node("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    src = a.shape
    return Node("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def sigmoid(a):
    # 0.5 * (1 + tanh(x / 2)) avoids overflow warnings for large |x|
    s = (0.5 * (1.0 + np.tanh(0.5 * a.value))).astype(a.value.dtype)
    return Node("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a):
    t = np.tanh(a.value)
    return Node("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def softmax(a):
    """Softmax along the last axis."""
    v = a.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Node("softmax", p, (a,), back)


def log(a):
    v = a.value
    clipped = np.maximum(v, v.dtype.type(LOG_FLOOR))
    live = v >= LOG_FLOOR
    return Node("log", np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0).astype(v.dtype),))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    v = a.value
    shape = v.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node("sum", np.asarray(v.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a):
    return scale(sum(a), 1.0 / a.value.size)


def mse(a, b):
    """Mean of squared elementwise differences, a scalar."""
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch {a.shape} vs {b.shape}")
    d = a.value - b.value
    n = d.size
    return Node("mse", np.asarray((d * d).sum() / n, dtype=d.dtype), (a, b),
                lambda g: (g * 2 * d / n, -g * 2 * d / n))


def gather(a, index, axis=0):
    """Select rows (axis=0) or columns (axis=1); repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)
    v = a.value
    out = np.take(v, index, axis=axis)

    def back(g):
        ga = np.zeros_like(v)
        if axis == 0:
            np.add.at(ga, index, g)
        else:
            np.add.at(ga.T, index, g.T)
        return (ga,)

    return Node("gather", out, (a,), back)


def concat(nodes, axis=1):
    nodes = list(nodes)
    _check_2d(*nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return Node("concat", np.concatenate([n.value for n in nodes], axis=axis), nodes,
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def straight_through(source, value):
    """Forward ``value`` exactly; hand the incoming gradient to ``source`` unchanged."""
    value = np.asarray(value, dtype=source.value.dtype)
    if value.shape != source.shape:
        raise ContractError("straight-through value must match the source shape")
    return Node("straight_through", value.copy(), (source,), lambda g: (g,))


def _ancestors(root):
    seen = {root.id: root}
    stack = [root]
    while stack:
        n = stack.pop()
        for p in n.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(loss):
    """Accumulate d(loss)/d(node) into every ancestor; return {id: grad} for trainable leaves."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _ancestors(loss)
    for n in order:
        if not np.all(np.isfinite(n.value)):
            raise NumericFault(f"non-finite value in {n.op} node {n.id}")
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    out = {}
    for n in order:
        if n.grad is None:
            continue
        if n._back is not None:
            for p, g in zip(n.parents, n._back(n.grad)):
                g = np.asarray(g, dtype=p.value.dtype).reshape(p.value.shape)
                p.grad = g if p.grad is None else p.grad + g
        if n.trainable:
            out[n.id] = n.grad
    for n in order:
        if n.trainable and n.id not in out:
            out[n.id] = np.zeros_like(n.value)
    return out


def grad_of(loss, *nodes):
    grads = backward(loss)
    return [grads.get(n.id, np.zeros_like(n.value)) for n in nodes]


class Optimizer:
    """SGD or Adam over a name -> array parameter dict, updated in place."""

    def __init__(self, kind="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {kind!r}")
        if not lr > 0:
            raise ContractError("learning rate must be positive")
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ContractError(f"gradient shape mismatch for {k}")
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient for {k}")
        if self.kind == "sgd":
            for k, g in grads.items():
                params[k] -= params[k].dtype.type(self.lr) * g
            return params
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params

    def state(self):
        return {"kind": self.kind, "lr": self.lr, "t": self.t}


def grad_check(f, x, eps=1e-3):
    """Max relative error between backward and central differences of scalar ``f`` at ``x``.

    ``f`` maps a parameter Node to a scalar Node. The analytic gradient is taken at
    the working precision; the central differences are evaluated in float64.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.asarray(x)
    node = param(x)
    out = f(node)
    if not np.all(np.isfinite(out.value)):
        raise NumericFault("f is not finite at x")
    (analytic,) = grad_of(out, node)
    analytic = analytic.astype(np.float64).ravel()
    x64 = x.astype(np.float64)
    numeric = np.empty(x64.size)
    with precision(np.float64):
        for i in range(x64.size):
            xp = x64.copy().ravel()
            xm = xp.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = float(f(param(xp.reshape(x64.shape))).value.item())
            fm = float(f(param(xm.reshape(x64.shape))).value.item())
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericFault("f is not finite near x")
            numeric[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
