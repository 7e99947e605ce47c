"""Shared test oracles: random affine instances and a quadratic-exact value model."""

import numpy as np

from deephjb.diffengine import DerivativeBundle
from deephjb.oracle import lqr_value
from deephjb.problems import AffineAt


def random_instance(rng, n=None, m=None, lam=None):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    d = int(rng.integers(1, 3))
    lam = float(rng.choice([0.0, 0.01, 0.5])) if lam is None else lam
    B = rng.standard_normal((m, m))
    R = B @ B.T + 0.5 * np.eye(m)
    S = rng.standard_normal((n, n))
    hess = S @ S.T  # PSD keeps Rt positive definite
    a = AffineAt(rng.standard_normal(n), rng.standard_normal((n, m)), rng.standard_normal((n, d)), lam, R)
    bundle = DerivativeBundle(float(rng.standard_normal()), float(rng.standard_normal()), rng.standard_normal(n), hess)
    return a, bundle, float(rng.uniform(0, 2))


def general_parts(a, u):
    """b, sigma, running cost without L, for one point."""
    Gu = a.G @ u
    b = a.F + Gu
    sigma = np.concatenate([(a.lam * Gu)[:, None], a.H], axis=1)
    return b, sigma, 0.5 * u @ a.R @ u


class QuadraticValue:
    """Value model returning the exact Riccati bundle at path nodes."""

    def __init__(self, sol):
        self.sol = sol

    def node_bundles(self, states, nodes):
        M, K, n = states.shape
        parts = [lqr_value(self.sol, t, states[:, k]) for k, t in enumerate(nodes)]
        stack = lambda f: np.stack([getattr(p, f) for p in parts], axis=1)  # noqa: E731
        return DerivativeBundle(
            stack("value").reshape(M * K),
            stack("dt").reshape(M * K),
            stack("grad_x").reshape(M * K, n),
            stack("hess_x").reshape(M * K, n, n),
        )


class ExplicitControlNet:
    """Control model returning the explicit control of a value model (2-Net harness)."""

    def __init__(self, problem, value):
        self.problem, self.value = problem, value

    def node_controls(self, states, nodes):
        from deephjb.hjb import explicit_control

        M, K, n = states.shape
        d = self.value.node_bundles(states, nodes)
        t = np.tile(nodes, M)
        a = self.problem.form.at(t, states.reshape(M * K, n))
        return explicit_control(d, a.G, a.R, a.lam)
