"""Feedback policies ``u(t, x)`` for rollouts.

A policy is any callable ``policy(t, x) -> u`` on a batch x of shape (M, n).
Recurrent policies carry state between calls and are reset at the start of
each rollout through ``reset(M)``.  Policies that also know the value model
set ``last_value`` after each call so rollouts can record ``q`` along paths.
"""

from __future__ import annotations

import numpy as np

from . import diffengine as de
from . import tensor as tn
from .hjb import explicit_control
from .networks import forward_jet


class ZeroPolicy:
    def __init__(self, m):
        self.m = m

    def __call__(self, t, x):
        return np.zeros((x.shape[0], self.m))


class FunctionPolicy:
    """Wraps a plain function ``fn(t, x) -> u``."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, x):
        return np.asarray(self.fn(t, x), dtype=np.float64)


def _inputs(t, x):
    return np.column_stack([np.full(x.shape[0], float(t)), x])


class _Stepper:
    """Steps a network along a batch of paths, carrying LSTM state."""

    def __init__(self, net, order):
        self.net = net
        self.order = order
        self.state = None

    def reset(self, M):
        self.state = self.net.initial_state(M)

    def __call__(self, t, x):
        jet, nxt = forward_jet(self.net.params, self.net.config, _inputs(t, x), self.state, self.order)
        self.state = nxt.detach() if nxt is not None else None
        return jet


class ControlNetPolicy:
    """Control network as feedback (2-network solver); optionally records q."""

    def __init__(self, control_net, value_net=None):
        self.control = _Stepper(control_net, 0)
        self.value = None if value_net is None else _Stepper(value_net, 0)
        self.last_value = None

    def reset(self, M):
        self.control.reset(M)
        if self.value is not None:
            self.value.reset(M)

    def __call__(self, t, x):
        if self.value is not None:
            self.last_value = np.asarray(tn.value(self.value(t, x).val))[:, 0]
        return np.asarray(tn.value(self.control(t, x).val))


class ExplicitPolicy:
    """``u = -Rt^{-1} G^T grad q`` from the value network (1-network solver)."""

    def __init__(self, problem, value_net, ridge=0.0):
        self.problem = problem
        self.value = _Stepper(value_net, 2)
        self.ridge = ridge
        self.last_value = None

    def reset(self, M):
        self.value.reset(M)

    def __call__(self, t, x):
        d = de.bundle_from_jet(self.value(t, x)).detach()
        self.last_value = d.value
        tb = np.full(x.shape[0], float(t))
        a = self.problem.form.at(tb, x)
        return explicit_control(d, a.G, a.R, a.lam, self.ridge)
