"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` wraps an ndarray and remembers how it was produced, so a
single call to :meth:`Tensor.backward` on a scalar propagates gradients to
every leaf created with ``requires_grad=True``.  The tape is first order only;
second derivatives with respect to network inputs are built explicitly as
forward jets (see :mod:`deephjb.diffengine`) out of these primitive ops.

The module-level functions (``sin``, ``matmul``, ``solve`` ...) accept plain
ndarrays as well and then simply return ndarrays, which lets the dynamics and
Hamiltonian code run unchanged with or without a tape.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    # keep numpy from swallowing Tensors into object arrays on ``ndarray op Tensor``
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def backward(self, seed=None):
        """Return ``{id(leaf): grad}`` for every leaf reachable from ``self``."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        leaves = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves

    # -- operators -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only constant scalar exponents are supported")
        x = self.data
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# graph helpers


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _make(data, parents, backward):
    """Create an op output, recording the tape only when some parent needs it."""
    live = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in live):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x):
    """The plain ndarray behind ``x`` (works for ndarrays and Tensors)."""
    return _data(x)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def _unary(fn, dfn):
    def op(x):
        if not isinstance(x, Tensor):
            return fn(np.asarray(x, dtype=np.float64))
        xd = x.data
        y = fn(xd)
        return _make(y, (x,), lambda g: (g * dfn(xd, y),))

    return op


sin = _unary(np.sin, lambda x, y: np.cos(x))
cos = _unary(np.cos, lambda x, y: -np.sin(x))
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y)
exp = _unary(np.exp, lambda x, y: y)
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
square = _unary(np.square, lambda x, y: 2.0 * x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


sigmoid = _unary(_sigmoid, lambda x, y: y * (1.0 - y))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    d = _data(x)
    count = d.size if axis is None else np.prod([d.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) / float(count)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2):
    if not isinstance(x, Tensor):
        return np.swapaxes(x, a1, a2)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def expand_dims(x, axis):
    d = _data(x)
    return reshape(x, np.expand_dims(d, axis).shape)


def getitem(x, idx):
    if not isinstance(x, Tensor):
        return np.asarray(x)[idx]
    shape = x.shape

    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def broadcast_to(x, shape):
    if not isinstance(x, Tensor):
        return np.broadcast_to(x, shape)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def stack(xs, axis=0):
    if not _any_tensor(*xs):
        return np.stack([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    ts = [as_tensor(x) for x in xs]
    shapes = [np.broadcast_shapes(*[t.shape for t in ts])] * len(ts)
    arrs = [np.broadcast_to(t.data, s) for t, s in zip(ts, shapes)]
    out = np.stack(arrs, axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(p, t.shape) for p, t in zip(parts, ts))

    return _make(out, tuple(ts), backward)


def concat(xs, axis=-1):
    if not _any_tensor(*xs):
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    ts = [as_tensor(x) for x in xs]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul on Tensors expects operands with ndim >= 2")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def einsum(spec, *ops):
    """``np.einsum`` for explicit-output specs (no ellipsis, no repeated index
    inside a single operand)."""
    if not _any_tensor(*ops):
        return np.einsum(spec, *ops)
    ins, out = spec.replace(" ", "").split("->")
    in_subs = ins.split(",")
    ts = [as_tensor(o) for o in ops]
    datas = [t.data for t in ts]
    sizes = {}
    for s, d in zip(in_subs, datas):
        for ch, n in zip(s, d.shape):
            sizes[ch] = n

    def backward(g):
        grads = []
        for i, t in enumerate(ts):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(ts)) if j != i]
            avail = set(out).union(*others) if others else set(out)
            target = in_subs[i]
            kept = "".join(ch for ch in target if ch in avail)
            sub = ",".join([out] + others) + "->" + kept
            gi = np.einsum(sub, g, *[datas[j] for j in range(len(ts)) if j != i])
            if kept != target:
                # indices summed away only inside this operand: broadcast back
                full = tuple(sizes[ch] for ch in target)
                expand = tuple(k for k, ch in enumerate(target) if ch not in kept)
                gi = np.broadcast_to(np.expand_dims(gi, expand), full)
            grads.append(gi)
        return tuple(grads)

    return _make(np.einsum(spec, *datas), tuple(ts), backward)


def solve(A, b):
    """Batched ``A x = b`` with ``b`` of shape (..., k) (vector right-hand side)."""
    if not _any_tensor(A, b):
        return np.linalg.solve(A, np.asarray(b)[..., None])[..., 0]
    A, b = as_tensor(A), as_tensor(b)
    Ad, bd = A.data, b.data
    x = np.linalg.solve(Ad, bd[..., None])[..., 0]

    def backward(g):
        gb = np.linalg.solve(np.swapaxes(Ad, -1, -2), g[..., None])[..., 0]
        gA = -gb[..., :, None] * x[..., None, :]
        return _unbroadcast(gA, Ad.shape), _unbroadcast(gb, bd.shape)

    return _make(x, (A, b), backward)


def grad(output, leaves):
    """Gradients of scalar ``output`` with respect to each Tensor in ``leaves``."""
    found = output.backward() if isinstance(output, Tensor) and output.requires_grad else {}
    return [found.get(id(t), np.zeros_like(t.data)) for t in leaves]
