"""Exact input derivatives of scalar networks, differentiable in the parameters.

A :class:`Jet` carries ``(value, d/d(t,x), d^2/dx^2)`` of a layer's
activations with respect to the network input ``s = (t, x)``.  Layers push jets
forward in closed form (affine maps, smooth activations, products), using only
:mod:`deephjb.tensor` ops, so every entry of the resulting
:class:`DerivativeBundle` is itself a node on the tape and a single reverse
sweep yields parameter gradients of losses that consume ``dq/dt``, ``grad q``
and ``hess q``.

Shapes (batch ``B``, width ``k``, state dim ``n``, input dim ``d = 1 + n``)::

    val  (B, k)
    jac  (B, k, d)      column 0 is the time derivative
    hess (B, k, n, n)   state-state block only; ``None`` means identically zero
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import NumericError, ShapeError


@dataclass
class Jet:
    val: object
    jac: object = None
    hess: object = None
    order: int = 0
    seed: bool = False  # jac is the identity of the raw input

    @property
    def width(self):
        return tn.value(self.val).shape[-1]

    def slice(self, lo, hi):
        return Jet(
            self.val[:, lo:hi],
            None if self.jac is None else self.jac[:, lo:hi],
            None if self.hess is None else self.hess[:, lo:hi],
            self.order,
        )


def input_jet(s, order):
    """Seed jet for the raw input ``s`` of shape (B, d)."""
    s = np.asarray(s, dtype=np.float64)
    if order == 0:
        return Jet(s, order=0)
    B, d = s.shape
    jac = np.broadcast_to(np.eye(d), (B, d, d))
    return Jet(s, jac, None, order, seed=True)


def affine(jet, W, b, extra=None):
    """``z = a W^T + b (+ extra)``; ``extra`` is a (B, k) term constant in the input."""
    val = tn.matmul(jet.val, tn.swapaxes(W, 0, 1)) + b
    if extra is not None:
        val = val + extra
    if jet.order == 0:
        return Jet(val, order=0)
    WT = tn.swapaxes(W, 0, 1)
    if jet.seed:
        B, _, d = np.shape(jet.jac)
        jac = tn.broadcast_to(tn.reshape(W, (1,) + np.shape(tn.value(W))), (B,) + np.shape(tn.value(W)))
    else:
        jac = _mix(jet.jac, WT, 2)
    hess = None if jet.hess is None else _mix(jet.hess, WT, 3)
    return Jet(val, jac, hess, jet.order)


def _mix(a, WT, last):
    """Contract channel axis 1 of ``a`` with ``WT`` (j, k) as one flat matrix product."""
    moved = tn.swapaxes(a, 1, last)
    shape = np.shape(tn.value(moved))
    out = tn.matmul(tn.reshape(moved, (-1, shape[-1])), WT)
    out = tn.reshape(out, shape[:-1] + (np.shape(tn.value(WT))[1],))
    return tn.swapaxes(out, 1, last)


def _outer_x(ja, jb):
    xa = ja[:, :, 1:]
    xb = jb[:, :, 1:]
    return tn.mul(tn.expand_dims(xa, 3), tn.expand_dims(xb, 2))


def _activate(jet, y, d1, d2):
    if jet.order == 0:
        return Jet(y, order=0)
    jac = tn.expand_dims(d1, 2) * jet.jac
    if jet.order == 1:
        return Jet(y, jac, None, 1)
    hess = tn.expand_dims(tn.expand_dims(d2, 2), 3) * _outer_x(jet.jac, jet.jac)
    if jet.hess is not None:
        hess = hess + tn.expand_dims(tn.expand_dims(d1, 2), 3) * jet.hess
    return Jet(y, jac, hess, 2)


def tanh(jet):
    y = tn.tanh(jet.val)
    if jet.order == 0:
        return Jet(y, order=0)
    d1 = 1.0 - y * y
    d2 = -2.0 * y * d1
    return _activate(jet, y, d1, d2)


def sigmoid(jet):
    y = tn.sigmoid(jet.val)
    if jet.order == 0:
        return Jet(y, order=0)
    d1 = y * (1.0 - y)
    d2 = d1 * (1.0 - 2.0 * y)
    return _activate(jet, y, d1, d2)


ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid}


def add(a, b):
    order = min(a.order, b.order)
    val = a.val + b.val
    if order == 0:
        return Jet(val, order=0)
    jac = a.jac + b.jac
    hess = _add_opt(a.hess, b.hess) if order == 2 else None
    return Jet(val, jac, hess, order)


def scale(a, c):
    """Product with ``c`` (B, k) that does not depend on the input."""
    val = a.val * c
    if a.order == 0:
        return Jet(val, order=0)
    jac = a.jac * tn.expand_dims(c, 2)
    hess = None
    if a.order == 2 and a.hess is not None:
        hess = a.hess * tn.expand_dims(tn.expand_dims(c, 2), 3)
    return Jet(val, jac, hess, a.order)


def mul(a, b):
    order = min(a.order, b.order)
    val = a.val * b.val
    if order == 0:
        return Jet(val, order=0)
    jac = a.jac * tn.expand_dims(b.val, 2) + b.jac * tn.expand_dims(a.val, 2)
    if order == 1:
        return Jet(val, jac, None, 1)
    hess = _outer_x(a.jac, b.jac) + _outer_x(b.jac, a.jac)
    if a.hess is not None:
        hess = hess + a.hess * tn.expand_dims(tn.expand_dims(b.val, 2), 3)
    if b.hess is not None:
        hess = hess + b.hess * tn.expand_dims(tn.expand_dims(a.val, 2), 3)
    return Jet(val, jac, hess, 2)


def _add_opt(x, y):
    if x is None:
        return y
    if y is None:
        return x
    return x + y


# ---------------------------------------------------------------------------


@dataclass
class DerivativeBundle:
    """``q``, ``dq/dt``, ``grad_x q`` and ``hess_x q`` at one or more points.

    Fields are ndarrays, or Tensors when produced under a parameter tape.
    Batched bundles carry a leading batch axis on every field.
    """

    value: object
    dt: object
    grad_x: object
    hess_x: object

    def detach(self):
        return DerivativeBundle(*(np.array(tn.value(f)) for f in (self.value, self.dt, self.grad_x, self.hess_x)))

    def __getitem__(self, i):
        return DerivativeBundle(self.value[i], self.dt[i], self.grad_x[i], self.hess_x[i])


def bundle_from_jet(jet):
    """Read the bundle off a width-1 output jet."""
    n = tn.value(jet.jac).shape[-1] - 1
    B = tn.value(jet.val).shape[0]
    hess = jet.hess[:, 0] if jet.hess is not None else np.zeros((B, n, n))
    return DerivativeBundle(jet.val[:, 0], jet.jac[:, 0, 0], jet.jac[:, 0, 1:], hess)


def _as_batch(t, x, n):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != n:
        raise ShapeError(f"state has shape {x.shape}, network expects dimension {n}")
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    return tb, xb, single


def eval_with_input_derivatives(net, t, x, state=None):
    """Bundle of ``(q, dq/dt, grad_x q, hess_x q)`` for a value network.

    ``x`` may be a single state ``(n,)`` or a batch ``(B, n)``.  For LSTM
    networks the derivative is the partial with respect to the current step
    input with the incoming recurrent ``state`` held fixed.
    """
    tb, xb, single = _as_batch(t, x, net.config.state_dim)
    jet, _ = net.jet(tb, xb, state=state, order=2)
    bundle = bundle_from_jet(jet)
    if single:
        bundle = bundle[0]
    return bundle


def param_gradient(loss, params):
    """Gradient of ``loss(params_tensor_view)`` with respect to the flat vector.

    ``loss`` receives a :class:`~deephjb.networks.NetworkParams` whose ``flat``
    is a tape leaf and must return a scalar (Tensor or float).
    """
    leaf = tn.Tensor(params.flat.copy(), requires_grad=True)
    out = loss(params.with_flat(leaf))
    val = float(np.asarray(tn.value(out)).reshape(()))
    if not np.isfinite(val):
        raise NumericError(f"loss is not finite (value {val})")
    if not isinstance(out, tn.Tensor) or not out.requires_grad:
        return np.zeros_like(params.flat)
    g = out.backward().get(id(leaf))
    return np.zeros_like(params.flat) if g is None else np.asarray(g)


def param_gradients(loss, params_list):
    """Loss value and gradients with respect to several parameter vectors at once."""
    leaves = [tn.Tensor(np.array(tn.value(p.flat)), requires_grad=True) for p in params_list]
    out = loss(*[p.with_flat(leaf) for p, leaf in zip(params_list, leaves)])
    val = float(np.asarray(tn.value(out)).reshape(()))
    if not np.isfinite(val):
        raise NumericError(f"loss is not finite (value {val})")
    grads = {}
    if isinstance(out, tn.Tensor) and out.requires_grad:
        grads = out.backward()
    return val, [np.asarray(grads.get(id(leaf), np.zeros_like(leaf.data))) for leaf in leaves]


def central_difference_bundle(net, t, x, step, state=None):
    """Input derivatives by central differences of ``net.value`` (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]

    def q(tt, xx):
        return float(net.value(np.array([tt]), xx[None, :], state=state)[0])

    q0 = q(t, x)
    dt = (q(t + step, x) - q(t - step, x)) / (2 * step)
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    eye = np.eye(n)
    for i in range(n):
        ei = eye[i] * step
        grad[i] = (q(t, x + ei) - q(t, x - ei)) / (2 * step)
        hess[i, i] = (q(t, x + ei) - 2 * q0 + q(t, x - ei)) / step**2
        for j in range(i + 1, n):
            ej = eye[j] * step
            hij = (q(t, x + ei + ej) - q(t, x + ei - ej) - q(t, x - ei + ej) + q(t, x - ei - ej)) / (4 * step**2)
            hess[i, j] = hess[j, i] = hij
    return DerivativeBundle(q0, dt, grad, hess)


def _rel_err(a, b, floor):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def finite_difference_check(net, point, step, floor=1.0):
    """Max relative discrepancy between analytic and central-difference bundles.

    Relative error is measured as ``|a - b| / max(|a|, |b|, floor)`` so entries
    that are exactly zero analytically do not blow the ratio up.
    """
    t, x = point
    exact = eval_with_input_derivatives(net, t, x)
    fd = central_difference_bundle(net, t, x, step)
    return max(
        _rel_err(exact.dt, fd.dt, floor),
        _rel_err(exact.grad_x, fd.grad_x, floor),
        _rel_err(exact.hess_x, fd.hess_x, floor),
    )
