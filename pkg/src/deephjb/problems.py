"""Stochastic optimal control problem instances.

All maps are batched: ``t`` is a scalar or (B,), ``x`` is (B, n), ``u`` is
(B, m).  ``b -> (B, n)``, ``sigma -> (B, n, d_hat)``, ``phi -> (B,)``,
``psi -> (B,)``.  Maps are written with :mod:`deephjb.tensor` functions so
that ``u`` may be a Tensor on a parameter tape (the 2-network loss needs this).

Built-in problems are created by named builders from plain parameter dicts,
which is also their serialized form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError


@dataclass(frozen=True, eq=False)
class CostSpec:
    Q: np.ndarray
    Q_T: np.ndarray
    R: np.ndarray
    x_target: np.ndarray

    def __post_init__(self):
        for name in ("Q", "Q_T", "R", "x_target"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        object.__setattr__(self, "Q", np.atleast_2d(self.Q))
        object.__setattr__(self, "Q_T", np.atleast_2d(self.Q_T))
        object.__setattr__(self, "R", np.atleast_2d(self.R))
        n = self.x_target.shape[0]
        if self.Q.shape != (n, n) or self.Q_T.shape != (n, n):
            raise ShapeError("Q and Q_T must be n x n with n = len(x_target)")
        if self.R.shape[0] != self.R.shape[1]:
            raise ShapeError("R must be square")


def _quad(M, v):
    """Row-wise ``v^T M v`` for v of shape (B, k) (ndarray or Tensor)."""
    return tn.sum_(tn.matmul(v, M) * v, axis=-1)


def eval_running_cost(cost, x, u):
    """``(x - x_target)^T Q (x - x_target) + 1/2 u^T R u``; single or batched."""
    single = np.ndim(tn.value(x)) == 1
    if single:
        x, u = tn.reshape(x, (1, -1)), tn.reshape(u, (1, -1))
    out = _quad(cost.Q, x - cost.x_target) + 0.5 * _quad(cost.R, u)
    return out[0] if single else out


def eval_terminal_cost(cost, x):
    """``(x - x_target)^T Q_T (x - x_target)``; single or batched."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    dev = np.atleast_2d(x) - cost.x_target
    out = _quad(cost.Q_T, dev)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class GeneralForm:
    b: Callable
    sigma: Callable
    phi: Callable
    psi: Callable


@dataclass(frozen=True, eq=False)
class AffineAt:
    """An affine form evaluated at a batch of points."""

    F: np.ndarray  # (B, n)
    G: np.ndarray  # (B, n, m)
    H: np.ndarray  # (B, n, d)
    lam: float
    R: np.ndarray  # (m, m)


@dataclass(frozen=True, eq=False)
class AffineForm:
    """``b = F + G u``, ``sigma = [lam G u | H]``, ``phi = L + 1/2 u^T R u``."""

    F: Callable
    G: Callable
    H: Callable
    lam: float
    L: Callable
    R: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "R", R)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not np.allclose(R, R.T, rtol=0, atol=1e-14):
            raise ConfigError("R must be symmetric")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("R must be positive definite") from exc

    def at(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        return AffineAt(self.F(t, x), self.G(t, x), self.H(t, x), self.lam, self.R)


def affine_to_general(a, cost):
    """Express an affine form through general ``(b, sigma, phi, psi)`` maps."""

    def b(t, x, u):
        Gx = a.G(t, x)
        return a.F(t, x) + tn.einsum("bnm,bm->bn", Gx, u)

    def sigma(t, x, u):
        Gx = a.G(t, x)
        col = a.lam * tn.einsum("bnm,bm->bn", Gx, u)
        return tn.concat([tn.expand_dims(col, 2), a.H(t, x)], axis=2)

    def phi(t, x, u):
        return a.L(t, x) + 0.5 * _quad(a.R, u)

    def psi(x):
        return eval_terminal_cost(cost, x)

    return GeneralForm(b, sigma, phi, psi)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    name: str
    n: int
    m: int
    d_hat: int
    t0: float
    T: float
    x0: np.ndarray
    form: object  # GeneralForm or AffineForm
    cost: CostSpec
    N: int = 50
    M: int = 50
    lr: float = 1e-3
    builder: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=np.float64)))
        if not self.T > self.t0:
            raise ConfigError("horizon needs T > t0")
        if self.x0.shape != (self.n,) or self.cost.x_target.shape != (self.n,):
            raise ShapeError("x0 / x_target do not match state dimension n")
        if self.cost.R.shape != (self.m, self.m):
            raise ShapeError("R does not match control dimension m")
        if isinstance(self.form, AffineForm) and self.form.R.shape != (self.m, self.m):
            raise ShapeError("affine R does not match control dimension m")

    @property
    def is_affine(self):
        return isinstance(self.form, AffineForm)

    @property
    def general(self):
        if self.is_affine:
            return affine_to_general(self.form, self.cost)
        return self.form

    @property
    def lam(self):
        return self.form.lam if self.is_affine else None

    def to_config(self):
        return {"builder": self.builder, "params": self.params}

    def spot_check(self, points=16, seed=0):
        """Evaluate every map at random points and confirm outputs are finite with the right shapes."""
        rng = np.random.default_rng(seed)
        x = self.x0 + rng.normal(size=(points, self.n))
        u = rng.normal(size=(points, self.m))
        t = rng.uniform(self.t0, self.T, size=points)
        g = self.general
        shapes = {
            "b": (g.b(t, x, u), (points, self.n)),
            "sigma": (g.sigma(t, x, u), (points, self.n, self.d_hat)),
            "phi": (g.phi(t, x, u), (points,)),
            "psi": (g.psi(x), (points,)),
        }
        for name, (val, shape) in shapes.items():
            val = np.asarray(val)
            if val.shape != shape:
                raise ShapeError(f"{self.name}: {name} has shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ConfigError(f"{self.name}: {name} is not finite on the test domain")


# ---------------------------------------------------------------------------
# builders


def _batch_t(t, B):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))


def _const(mat):
    mat = np.asarray(mat, dtype=np.float64)

    def fn(t, x):
        return np.broadcast_to(mat, (x.shape[0],) + mat.shape)

    return fn


def _state_cost(cost):
    def L(t, x):
        return _quad(cost.Q, x - cost.x_target)

    return L


def _affine_problem(name, builder, params, F, G, H, d, lam, cost, x0, T, N, M, lr):
    n = cost.x_target.shape[0]
    m = cost.R.shape[0]
    form = AffineForm(F, G, H, lam, _state_cost(cost), cost.R)
    return ProblemSpec(name, n, m, 1 + d, 0.0, T, x0, form, cost, N, M, lr, builder, params)


def build_example1(Q=4.0, Q_T=100.0, R=2.0, x0=1.0, x_target=0.0, T=3.0, N=50, M=50, lr=1e-3, name="example1"):
    """dx = sin(u) dt + x dW; no closed-form minimizer of the Hamiltonian."""
    params = dict(Q=Q, Q_T=Q_T, R=R, x0=x0, x_target=x_target, T=T, N=N, M=M, lr=lr, name=name)
    cost = CostSpec([[Q]], [[Q_T]], [[R]], [x_target])

    def b(t, x, u):
        return tn.sin(u)

    def sigma(t, x, u):
        return np.asarray(x)[:, :, None]

    def phi(t, x, u):
        return eval_running_cost(cost, x, u)

    def psi(x):
        return eval_terminal_cost(cost, x)

    return ProblemSpec(name, 1, 1, 1, 0.0, T, [x0], GeneralForm(b, sigma, phi, psi), cost, N, M, lr, "example1", params)


def build_linear(n=2, a=0.2, g=1.0, h=0.3, q=80.0, q_T=80.0, r=0.02, lam=0.5, x0=1.0, T=1.0, N=20, M=50, lr=1e-2, name=None):
    """Multi-agent linear system dx = (A x + G u) dt + lam G u dw1 + H dw2 with scaled identities."""
    name = name or f"linear{n}"
    params = dict(n=n, a=a, g=g, h=h, q=q, q_T=q_T, r=r, lam=lam, x0=x0, T=T, N=N, M=M, lr=lr, name=name)
    eye = np.eye(n)
    cost = CostSpec(q * eye, q_T * eye, r * eye, np.zeros(n))
    A = a * eye

    def F(t, x):
        return x @ A.T

    return _affine_problem(
        name, "linear", params, F, _const(g * eye), _const(h * eye), n, lam, cost, np.full(n, x0), T, N, M, lr
    )


def build_pendulum(mass=1.0, grav=9.8, damping=1.2, length=1.0, R=0.05, Q=(20.0, 2.0), Q_T=(100.0, 50.0),
                   lam=0.01, x0=(math.pi / 2, 0.0), x_target=(0.0, 0.0), T=2.0, N=40, M=50, lr=1e-2, name="pendulum"):
    """m l^2 theta'' + m g l sin(theta) + b theta' = u with state (theta, theta')."""
    params = dict(mass=mass, grav=grav, damping=damping, length=length, R=R, Q=list(Q), Q_T=list(Q_T), lam=lam,
                  x0=list(x0), x_target=list(x_target), T=T, N=N, M=M, lr=lr, name=name)
    cost = CostSpec(np.diag(Q), np.diag(Q_T), [[R]], x_target)
    inertia = mass * length**2

    def F(t, x):
        th, om = x[:, 0], x[:, 1]
        return np.stack([om, -(grav / length) * np.sin(th) - (damping / inertia) * om], axis=1)

    G = _const([[0.0], [1.0 / inertia]])
    H = _const([[0.0, 0.0], [0.0, 1.0]])
    return _affine_problem(name, "pendulum", params, F, G, H, 2, lam, cost, x0, T, N, M, lr)


def build_cartpole(m_cart=1.0, m_pole=0.01, grav=9.8, length=1.0, R=0.05, Q=(0.0, 8.0, 1.2, 0.2),
                   lam=0.03, noise=0.1, x0=(0.0, 0.0, 0.0, 0.0), x_target=(0.0, math.pi, 0.0, 0.0),
                   T=3.0, N=50, M=50, lr=1e-2, name="cartpole"):
    """Cart-pole swing-up; state (x, theta, x', theta'), theta = 0 hanging down."""
    params = dict(m_cart=m_cart, m_pole=m_pole, grav=grav, length=length, R=R, Q=list(Q), lam=lam, noise=noise,
                  x0=list(x0), x_target=list(x_target), T=T, N=N, M=M, lr=lr, name=name)
    cost = CostSpec(np.diag(Q), np.diag(Q), [[R]], x_target)
    mc, mp, l, g_ = m_cart, m_pole, length, grav

    def F(t, x):
        th, xd, thd = x[:, 1], x[:, 2], x[:, 3]
        s, c = np.sin(th), np.cos(th)
        den = mc + mp * s * s
        return np.stack([
            xd,
            thd,
            mp * s * (l * thd**2 + g_ * c) / den,
            (-mp * l * thd**2 * s * c - (mc + mp) * g_ * s) / (l * den),
        ], axis=1)

    def G(t, x):
        th = x[:, 1]
        s, c = np.sin(th), np.cos(th)
        den = mc + mp * s * s
        out = np.zeros((x.shape[0], 4, 1))
        out[:, 2, 0] = 1.0 / den
        out[:, 3, 0] = -c / (l * den)
        return out

    H = np.zeros((4, 4))
    H[2:, 2:] = noise * np.eye(2)
    return _affine_problem(name, "cartpole", params, F, G, _const(H), 4, lam, cost, x0, T, N, M, lr)


def build_quadcopter(mass=0.2, grav=9.8, arm=0.15, inertia=0.1, R=1.5, Q=(8.0, 8.0, 12.0, 0.5, 0.5, 0.5),
                     lam=0.05, noise=0.1, x0=(0.0,) * 6, x_target=(1.0, 1.0, 0.0, 0.0, 0.0, 0.0),
                     T=2.5, N=40, M=50, lr=1e-2, name="quadcopter"):
    """Planar quadrotor, state (x, y, theta, x', y', theta'), control (total thrust, torque)."""
    params = dict(mass=mass, grav=grav, arm=arm, inertia=inertia, R=R, Q=list(Q), lam=lam, noise=noise,
                  x0=list(x0), x_target=list(x_target), T=T, N=N, M=M, lr=lr, name=name)
    cost = CostSpec(np.diag(Q), np.diag(Q), R * np.eye(2), x_target)

    def F(t, x):
        z = np.zeros(x.shape[0])
        return np.stack([x[:, 3], x[:, 4], x[:, 5], z, z - grav, z], axis=1)

    def G(t, x):
        th = x[:, 2]
        out = np.zeros((x.shape[0], 6, 2))
        out[:, 3, 0] = -np.sin(th) / mass
        out[:, 4, 0] = np.cos(th) / mass
        out[:, 5, 1] = 1.0 / inertia
        return out

    H = np.zeros((6, 6))
    H[3:, 3:] = noise * np.eye(3)
    return _affine_problem(name, "quadcopter", params, F, G, _const(H), 6, lam, cost, x0, T, N, M, lr)


BUILDERS = {
    "example1": build_example1,
    "linear": build_linear,
    "pendulum": build_pendulum,
    "cartpole": build_cartpole,
    "quadcopter": build_quadcopter,
}

BUILTINS = {
    "example1": ("example1", {}),
    "linear2": ("linear", {"n": 2}),
    "linear4": ("linear", {"n": 4}),
    "linear30": ("linear", {"n": 30}),
    "pendulum": ("pendulum", {}),
    "cartpole": ("cartpole", {}),
    "quadcopter": ("quadcopter", {}),
}


def get_builtin(name, **overrides):
    """One of the registered example problems, optionally with parameter overrides."""
    if name not in BUILTINS:
        raise ConfigError(f"unknown problem {name!r}; valid names: {', '.join(sorted(BUILTINS))}")
    builder, defaults = BUILTINS[name]
    kwargs = dict(defaults)
    kwargs.update(overrides)
    return problem_from_config({"builder": builder, "params": kwargs})


def problem_from_config(cfg):
    builder = cfg.get("builder")
    if builder not in BUILDERS:
        raise ConfigError(f"unknown problem builder {builder!r}; valid: {', '.join(sorted(BUILDERS))}")
    try:
        return BUILDERS[builder](**cfg.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {builder}: {exc}") from exc


def dumps_problem(spec):
    return json.dumps(spec.to_config(), sort_keys=True)


def loads_problem(text):
    return problem_from_config(json.loads(text))


def with_overrides(spec, **overrides):
    """Rebuild a problem with some builder parameters replaced (e.g. ``lam``, ``N``)."""
    params = dict(spec.params)
    params.update({k: v for k, v in overrides.items() if v is not None})
    return problem_from_config({"builder": spec.builder, "params": params})
