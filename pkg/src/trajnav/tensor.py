"""Small reverse-mode autodiff over numpy arrays.

Only the operations the navigation model needs are provided. Heavy blocks
(attention, layer norm, GELU, cross entropy) are fused into single graph nodes
with hand-written backward passes to keep Python overhead low.
"""
from __future__ import annotations

import contextlib
import math
from collections import defaultdict

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# global switches: gradient recording and FLOP counting

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Counts matmul FLOPs (2*m*k*n), bucketed by the active scope path."""

    def __init__(self):
        self.total = 0
        self.by_scope = defaultdict(int)

    def add(self, n):
        self.total += n
        self.by_scope["/".join(_scopes) or "-"] += n


_counters: list[FlopCounter] = []
_scopes: list[str] = []


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextlib.contextmanager
def flop_scope(name):
    _scopes.append(name)
    try:
        yield
    finally:
        _scopes.pop()


def _record_flops(n):
    for c in _counters:
        c.add(int(n))


# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        if isinstance(data, np.generic):
            data = np.asarray(data)  # 0-d results keep their precision
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _topo_order(root):
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
    order.reverse()
    return order


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data, parents, backward):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def parameter(data):
    return Tensor(np.asarray(data), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _make(a.data * b.data, (a, b), backward)


def tsum(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    shape, n = a.shape, a.data.size

    def backward(g):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward)


def stack_scalars(items):
    """Stack 0-d tensors into a 1-d tensor."""
    data = np.array([t.data for t in items], dtype=items[0].dtype)

    def backward(g):
        return tuple(np.asarray(g[i]) for i in range(len(items)))

    return _make(data, tuple(items), backward)


# ---------------------------------------------------------------------------
# shape ops


def concat(items, axis=0):
    if len(items) == 1:
        return items[0]
    data = np.concatenate([t.data for t in items], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in items])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tuple(items), backward)


def take(a, idx):
    """Row gather (int, slice, list or array index along axis 0)."""
    data = a.data[idx]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), backward)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _record_flops(2 * m * k * n)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# fused nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        return (g * d,)

    return _make(out.astype(x.dtype, copy=False), (a,), backward)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(a, gamma, beta, eps=1e-5):
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (a, gamma, beta), backward)


def cross_entropy(logits, target):
    """Mean negative log-likelihood. ``logits`` is [n] with an int target, or
    [rows, n] with an int array of targets (one per row)."""
    x = logits.data
    single = x.ndim == 1
    x2 = x[None] if single else x
    tgt = np.atleast_1d(np.asarray(target))
    n = x2.shape[-1]
    if tgt.shape[0] != x2.shape[0]:
        raise ShapeError(f"{tgt.shape[0]} targets for {x2.shape[0]} rows")
    if np.any(tgt < 0) or np.any(tgt >= n):
        raise IndexError(f"target {target} out of range for {n} classes")
    z = x2 - x2.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(x2.shape[0])
    loss = -logp[rows, tgt].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        p *= g / x2.shape[0]
        return (p[0] if single else p,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def attention(q, k, v, mask, heads):
    """Multi-head scaled dot-product attention on pre-projected inputs.

    q: [n, d], k and v: [m, d]; ``mask`` is a bool [n, m] array (True = attend)
    or None for full attention.
    """
    n, d = q.shape
    m = k.shape[0]
    if d % heads:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    if k.shape != (m, d) or v.shape != (m, d):
        raise ShapeError(f"key/value shapes {k.shape}, {v.shape} do not match query {q.shape}")
    if mask is not None:
        if mask.shape != (n, m):
            raise ShapeError(f"mask shape {mask.shape} != ({n}, {m})")
        if not mask.any(axis=1).all():
            raise MaskError("attention mask has a query row with no allowed key")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    _record_flops(2 * n * m * d)  # scores
    _record_flops(2 * n * m * d)  # weighted values
    qh = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(m, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(m, heads, dh).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * q.dtype.type(scale)
    if mask is not None:
        s = np.where(mask[None], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    out = (w @ vh).transpose(1, 0, 2).reshape(n, d)

    def backward(g):
        gh = g.reshape(n, heads, dh).transpose(1, 0, 2)
        gv = (w.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(m, d)
        gw = gh @ vh.transpose(0, 2, 1)
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = (gs @ kh).transpose(1, 0, 2).reshape(n, d)
        gk = (gs.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(m, d)
        return gq, gk, gv

    return _make(out, (q, k, v), backward)
