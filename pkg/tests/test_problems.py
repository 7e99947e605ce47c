import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deephjb.errors import ConfigError
from deephjb.problems import (
    BUILTINS,
    AffineForm,
    CostSpec,
    affine_to_general,
    dumps_problem,
    eval_running_cost,
    eval_terminal_cost,
    get_builtin,
    loads_problem,
)


def test_example1_parameters():
    p = get_builtin("example1")
    assert (p.n, p.m, p.T, p.N, p.M) == (1, 1, 3.0, 50, 50)
    assert p.cost.Q[0, 0] == 4 and p.cost.Q_T[0, 0] == 100 and p.cost.R[0, 0] == 2.0
    assert p.x0[0] == 1.0 and p.cost.x_target[0] == 0.0
    assert not p.is_affine
    x, u = np.array([[0.7]]), np.array([[0.3]])
    np.testing.assert_allclose(p.general.b(0.0, x, u), np.sin(u))
    np.testing.assert_allclose(p.general.sigma(0.0, x, u), x[:, :, None])


def test_pendulum_parameters():
    p = get_builtin("pendulum")
    assert (p.n, p.m, p.T, p.N, p.M, p.lam) == (2, 1, 2.0, 40, 50, 0.01)
    np.testing.assert_array_equal(p.cost.Q, np.diag([20.0, 2.0]))
    np.testing.assert_array_equal(p.cost.Q_T, np.diag([100.0, 50.0]))
    assert p.cost.R.shape == (1, 1) and p.cost.R[0, 0] == 0.05
    np.testing.assert_allclose(p.x0, [math.pi / 2, 0.0])
    assert p.d_hat == 3


def test_quadcopter_parameters():
    p = get_builtin("quadcopter")
    assert (p.n, p.m, p.T, p.N, p.M, p.lam) == (6, 2, 2.5, 40, 50, 0.05)
    np.testing.assert_array_equal(p.cost.R, 1.5 * np.eye(2))
    np.testing.assert_array_equal(p.cost.Q, np.diag([8, 8, 12, 0.5, 0.5, 0.5]))
    np.testing.assert_array_equal(p.cost.x_target, [1, 1, 0, 0, 0, 0])


def test_linear_parameters():
    p = get_builtin("linear2")
    assert (p.n, p.m, p.T, p.N, p.M, p.lam) == (2, 2, 1.0, 20, 50, 0.5)
    np.testing.assert_array_equal(p.cost.Q, 80 * np.eye(2))
    np.testing.assert_array_equal(p.x0, [1.0, 1.0])


def test_unknown_name_lists_valid():
    with pytest.raises(ConfigError, match="pendulum"):
        get_builtin("nope")


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_round_trip_and_spot_check(name):
    p = get_builtin(name)
    q = loads_problem(dumps_problem(p))
    assert q.to_config() == p.to_config()
    p.spot_check()


def test_running_and_terminal_cost_arithmetic():
    c = CostSpec([[4.0]], [[100.0]], [[2.0]], [0.0])
    assert eval_running_cost(c, np.array([1.0]), np.array([1.0])) == pytest.approx(5.0)
    assert eval_running_cost(c, np.array([0.0]), np.array([0.0])) == 0.0
    assert eval_terminal_cost(c, np.array([0.1])) == pytest.approx(1.0)


def test_running_cost_nonnegative_for_psd():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    B = rng.standard_normal((2, 2))
    c = CostSpec(A @ A.T, A.T @ A, B @ B.T + 0.1 * np.eye(2), rng.standard_normal(3))
    vals = eval_running_cost(c, rng.standard_normal((1000, 3)), rng.standard_normal((1000, 2)))
    assert np.all(vals >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_terminal_cost_congruence_invariance(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    QT = A @ A.T
    O, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    target = rng.standard_normal(3)
    x = rng.standard_normal(3)
    a = eval_terminal_cost(CostSpec(np.eye(3), QT, [[1.0]], target), x)
    b = eval_terminal_cost(CostSpec(np.eye(3), O @ QT @ O.T, [[1.0]], np.zeros(3)), O @ (x - target))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def _random_affine(rng, n, m, d, lam):
    Fm = rng.standard_normal((n, n))
    Gm = rng.standard_normal((n, m))
    Hm = rng.standard_normal((n, d))
    B = rng.standard_normal((m, m))
    R = B @ B.T + np.eye(m)
    cost = CostSpec(np.eye(n), np.eye(n), R, rng.standard_normal(n))
    form = AffineForm(
        lambda t, x: x @ Fm.T,
        lambda t, x: np.broadcast_to(Gm, (x.shape[0], n, m)),
        lambda t, x: np.broadcast_to(Hm, (x.shape[0], n, d)),
        lam,
        lambda t, x: eval_running_cost(cost, x, np.zeros((x.shape[0], m))),
        R,
    )
    return form, cost, Fm, Gm, Hm, R


def test_affine_to_general_matches_direct_evaluation():
    rng = np.random.default_rng(3)
    form, cost, Fm, Gm, Hm, R = _random_affine(rng, 3, 2, 2, 0.4)
    g = affine_to_general(form, cost)
    x, u = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(g.b(0.0, x, u), x @ Fm.T + u @ Gm.T, rtol=0, atol=1e-14)
    sig = g.sigma(0.0, x, u)
    np.testing.assert_allclose(sig[:, :, 0], 0.4 * u @ Gm.T, rtol=0, atol=1e-14)
    np.testing.assert_allclose(sig[:, :, 1:], np.broadcast_to(Hm, (5, 3, 2)), rtol=0, atol=1e-14)
    direct = np.einsum("bi,ij,bj->b", x - cost.x_target, cost.Q, x - cost.x_target) + 0.5 * np.einsum(
        "bi,ij,bj->b", u, R, u)
    np.testing.assert_allclose(g.phi(0.0, x, u), direct, rtol=1e-14, atol=1e-14)


def test_affine_trivial_cases():
    rng = np.random.default_rng(4)
    form, cost, *_ = _random_affine(rng, 2, 2, 1, 0.0)
    g = affine_to_general(form, cost)
    sig = g.sigma(0.0, rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    assert np.all(sig[:, :, 0] == 0)
    unit = AffineForm(lambda t, x: np.zeros_like(x), lambda t, x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)),
                      lambda t, x: np.zeros((x.shape[0], 2, 1)), 0.0, lambda t, x: np.zeros(x.shape[0]), np.eye(2))
    b = affine_to_general(unit, cost).b(0.0, np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(b, [[1.0, 0.0]])


def test_affine_rejects_bad_R_and_lambda():
    z = lambda t, x: None  # noqa: E731
    with pytest.raises(ConfigError):
        AffineForm(z, z, z, 0.0, z, [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ConfigError):
        AffineForm(z, z, z, 0.0, z, [[-1.0]])
    with pytest.raises(ConfigError):
        AffineForm(z, z, z, -0.1, z, [[1.0]])
