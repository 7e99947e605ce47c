"""Pathwise HJB residuals, the explicit optimal control and the training losses.

Every function here works on ndarrays and on Tensors alike; bundles coming
from a parameter tape make the returned residuals differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from . import tensor as tn
from .errors import ConditioningError, ConfigError
from .networks import LstmState, forward_jet


@dataclass(frozen=True)
class ResidualSample:
    step: int
    value: float


@dataclass(frozen=True)
class PathLoss:
    residual_term: float
    terminal_term: float

    @property
    def total(self):
        return self.residual_term + self.terminal_term


def _T(a):
    return tn.swapaxes(a, -1, -2)


def _trace_prod(hess, S):
    # tr(hess @ S) for symmetric S
    return tn.sum_(hess * S, axis=(-2, -1))


def _dot(a, b):
    return tn.sum_(a * b, axis=-1)


def hamiltonian_general(d, b, sigma, phi):
    """``dq/dt + b . grad q + 1/2 tr(hess q sigma sigma^T) + phi``."""
    S = tn.matmul(sigma, _T(sigma))
    return d.dt + _dot(b, d.grad_x) + 0.5 * _trace_prod(d.hess_x, S) + phi


def effective_control_cost(d, G, R, lam, ridge=0.0):
    """``R + lam^2 G^T hess q G`` (+ ``ridge I``)."""
    Rt = R
    if lam != 0.0:
        Rt = R + (lam * lam) * tn.matmul(tn.matmul(_T(G), d.hess_x), G)
    if ridge:
        Rt = Rt + ridge * np.eye(np.shape(tn.value(R))[-1])
    return Rt


def _check_pd(Rt):
    data = np.asarray(tn.value(Rt))
    try:
        np.linalg.cholesky(data)
    except np.linalg.LinAlgError:
        sym = 0.5 * (data + np.swapaxes(data, -1, -2))
        lo = float(np.min(np.linalg.eigvalsh(sym)))
        raise ConditioningError(
            f"effective control cost R + lam^2 G^T hess G is not positive definite (min eigenvalue {lo:.3e})",
            min_eigenvalue=lo,
        ) from None


def _gt_grad(G, grad):
    return tn.matmul(_T(G), tn.expand_dims(grad, -1))[..., 0]


def explicit_control(d, G, R, lam, ridge=0.0):
    """Minimizer ``u* = -Rt^{-1} G^T grad q`` of the control Hamiltonian."""
    Rt = effective_control_cost(d, G, R, lam, ridge)
    _check_pd(Rt)
    if np.ndim(tn.value(Rt)) == 2 and np.ndim(tn.value(d.grad_x)) > 1:
        Rt = tn.broadcast_to(Rt, (np.shape(tn.value(d.grad_x))[0],) + np.shape(tn.value(Rt)))
    return -tn.solve(Rt, _gt_grad(G, d.grad_x))


def hamiltonian_reduced(d, a, L_val, ridge=0.0):
    """Residual with the control eliminated through :func:`explicit_control`.

    ``dq/dt + 1/2 tr(hess q H H^T) + F . grad q - 1/2 grad q^T G Rt^{-1} G^T grad q + L``
    """
    Rt = effective_control_cost(d, a.G, a.R, a.lam, ridge)
    _check_pd(Rt)
    gtg = _gt_grad(a.G, d.grad_x)
    if np.ndim(tn.value(Rt)) == 2 and np.ndim(tn.value(gtg)) > 1:
        Rt = tn.broadcast_to(Rt, (np.shape(tn.value(gtg))[0],) + np.shape(tn.value(Rt)))
    w = tn.solve(Rt, gtg)
    HH = np.matmul(a.H, np.swapaxes(a.H, -1, -2))
    return d.dt + 0.5 * _trace_prod(d.hess_x, HH) + _dot(a.F, d.grad_x) - 0.5 * _dot(gtg, w) + L_val


def control_hamiltonian(d, a, L_val, u):
    """``(F + G u) . grad q + 1/2 tr(hess q sigma sigma^T) + L + 1/2 u^T R u`` at one point."""
    u = np.asarray(u, dtype=np.float64)
    Gu = a.G @ u
    sigma = np.concatenate([(a.lam * Gu)[:, None], a.H], axis=1)
    S = sigma @ sigma.T
    return float(
        (a.F + Gu) @ d.grad_x + 0.5 * np.sum(d.hess_x * S) + L_val + 0.5 * u @ a.R @ u
    )


# ---------------------------------------------------------------------------
# evaluating networks on every node of every path


def _flat_inputs(states, nodes):
    M, K, n = states.shape
    t = np.tile(nodes, M)
    return t, states.reshape(M * K, n)


def node_bundles(value_net, states, nodes):
    """Derivative bundle of the value model at all path nodes, path-major flattened."""
    if hasattr(value_net, "node_bundles"):
        return value_net.node_bundles(states, nodes)
    cfg, params = value_net.config, value_net.params
    M, K, n = states.shape
    if cfg.kind == "fc":
        t, x = _flat_inputs(states, nodes)
        jet, _ = forward_jet(params, cfg, np.column_stack([t, x]), None, order=2)
        return de.bundle_from_jet(jet)
    state = LstmState.zeros(cfg, M)
    parts = []
    for k in range(K):
        s = np.column_stack([np.full(M, nodes[k]), states[:, k]])
        jet, state = forward_jet(params, cfg, s, state, order=2)
        parts.append(de.bundle_from_jet(jet))
    return de.DerivativeBundle(
        tn.reshape(tn.stack([p.value for p in parts], axis=1), (M * K,)),
        tn.reshape(tn.stack([p.dt for p in parts], axis=1), (M * K,)),
        tn.reshape(tn.stack([p.grad_x for p in parts], axis=1), (M * K, n)),
        tn.reshape(tn.stack([p.hess_x for p in parts], axis=1), (M * K, n, n)),
    )


def node_controls(control_net, states, nodes):
    """Control network output at all path nodes, shape (M*(N+1), m)."""
    if hasattr(control_net, "node_controls"):
        return control_net.node_controls(states, nodes)
    cfg, params = control_net.config, control_net.params
    M, K, n = states.shape
    if cfg.kind == "fc":
        t, x = _flat_inputs(states, nodes)
        jet, _ = forward_jet(params, cfg, np.column_stack([t, x]), None, order=0)
        return jet.val
    state = LstmState.zeros(cfg, M)
    outs = []
    for k in range(K):
        s = np.column_stack([np.full(M, nodes[k]), states[:, k]])
        jet, state = forward_jet(params, cfg, s, state, order=0)
        outs.append(jet.val)
    return tn.reshape(tn.stack(outs, axis=1), (M * K, cfg.output_dim))


def _terminal_term(problem, d, states):
    M, K, _ = states.shape
    qT = tn.reshape(d.value, (M, K))[:, K - 1]
    mismatch = qT - problem.general.psi(states[:, -1])
    return mismatch * mismatch


def _terminal_mask(M, K):
    mask = np.ones((M, K, 1))
    mask[:, -1] = 0.0
    return mask.reshape(M * K, 1)


def residuals_2net(problem, value_net, control_net, paths):
    """Pathwise residual at every node, (M, N+1), with u from the control network.

    The control at the final node enters as a constant: it never drives a
    transition, so it receives no gradient.
    """
    states, nodes = paths.states, paths.grid.nodes
    M, K, _ = states.shape
    d = node_bundles(value_net, states, nodes)
    u = node_controls(control_net, states, nodes)
    if isinstance(u, tn.Tensor):
        mask = _terminal_mask(M, K)
        u = u * mask + tn.Tensor(u.data) * (1.0 - mask)
    t, x = _flat_inputs(states, nodes)
    g = problem.general
    res = hamiltonian_general(d, g.b(t, x, u), g.sigma(t, x, u), g.phi(t, x, u))
    return tn.reshape(res, (M, K)), d


def residuals_1net(problem, value_net, paths, ridge=0.0):
    """Reduced pathwise residual at every node, (M, N+1)."""
    if not problem.is_affine:
        raise ConfigError(f"problem {problem.name!r} has no control-affine form; the 1-network loss needs one")
    states, nodes = paths.states, paths.grid.nodes
    M, K, _ = states.shape
    d = node_bundles(value_net, states, nodes)
    t, x = _flat_inputs(states, nodes)
    a = problem.form.at(t, x)
    res = hamiltonian_reduced(d, a, problem.form.L(t, x), ridge)
    return tn.reshape(res, (M, K)), d


def path_terms_2net(problem, value_net, control_net, paths):
    """Per-path ``(residual_term, terminal_term)``, each of shape (M,)."""
    res, d = residuals_2net(problem, value_net, control_net, paths)
    return tn.mean(res * res, axis=1), _terminal_term(problem, d, paths.states)


def path_terms_1net(problem, value_net, paths, ridge=0.0):
    res, d = residuals_1net(problem, value_net, paths, ridge)
    return tn.mean(res * res, axis=1), _terminal_term(problem, d, paths.states)


def _to_path_loss(terms):
    r, q = (np.asarray(tn.value(v)) for v in terms)
    return PathLoss(float(r[0]), float(q[0]))


def path_loss_2net(problem, value_net, control_net, path):
    """Loss of a single path (a PathBatch holding one trajectory)."""
    return _to_path_loss(path_terms_2net(problem, value_net, control_net, path))


def path_loss_1net(problem, value_net, path, ridge=0.0):
    return _to_path_loss(path_terms_1net(problem, value_net, path, ridge))


def batch_loss(terms):
    """Mean over paths of ``residual_term + terminal_term``."""
    res, term = terms
    return tn.mean(res + term)


def control_objective(problem, d, control_net, paths):
    """Mean control Hamiltonian ``b.grad q + 1/2 tr(hess q sigma sigma^T) + phi``
    over the non-terminal nodes with the value derivatives held fixed."""
    states, nodes = paths.states, paths.grid.nodes
    M, K, _ = states.shape
    frozen = de.DerivativeBundle(0.0, 0.0, np.asarray(tn.value(d.grad_x)), np.asarray(tn.value(d.hess_x)))
    u = node_controls(control_net, states, nodes)
    t, x = _flat_inputs(states, nodes)
    g = problem.general
    h = hamiltonian_general(frozen, g.b(t, x, u), g.sigma(t, x, u), g.phi(t, x, u))
    h = tn.reshape(h, (M, K))[:, : K - 1]
    return tn.mean(h)
