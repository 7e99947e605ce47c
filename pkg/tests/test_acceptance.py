"""Acceptance criteria 1-9; each test prints one PASS/FAIL line.

The training criteria (4-7) take tens of minutes on one core.
"""

import json
import os
from dataclasses import replace

import numpy as np
import pytest

from deephjb import diffengine as de
from deephjb import hjb
from deephjb import tensor as tn
from deephjb.cli import main
from deephjb.networks import Network
from deephjb.oracle import (
    LQRPolicy,
    dt_sweep,
    grid_min_hamiltonian,
    lqr_value,
    monte_carlo_cost,
    riccati_for_problem,
    riccati_solve,
)
from deephjb.problems import get_builtin
from deephjb.sde import EVAL_STREAM, TimeGrid, rollout, sample_brownian
from deephjb.training import TrainConfig, make_policy, train

from conftest import random_net
from oracle_helpers import general_parts, random_instance

EVAL_PATHS = 30


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        assert ok, detail

    return emit


def _eval_batch(problem, algorithm, r, paths=EVAL_PATHS, grid=None, seed=0):
    grid = grid or TimeGrid(problem.t0, problem.T, problem.N)
    noise = sample_brownian(grid, problem.d_hat, paths, seed, stream=(EVAL_STREAM,))
    return rollout(problem, make_policy(problem, algorithm, r.value_net(), r.control_net()), grid, noise)


def test_criterion_1_reduction_identity(report):
    rng = np.random.default_rng(2024)
    worst_rel, worst_gap, lams = 0.0, -np.inf, set()
    for _ in range(200):
        a, d, L = random_instance(rng)
        lams.add(a.lam)
        u = hjb.explicit_control(d, a.G, a.R, a.lam)
        b, sigma, ucost = general_parts(a, u)
        full = hjb.hamiltonian_general(d, b, sigma, L + ucost)
        red = hjb.hamiltonian_reduced(d, a, L)
        worst_rel = max(worst_rel, abs(full - red) / max(1.0, abs(full)))
        _, best = grid_min_hamiltonian(d, a, radius=5.0, points_per_axis=41)
        h_star = hjb.control_hamiltonian(d, a, 0.0, u)
        worst_gap = max(worst_gap, h_star - best)
    ok = worst_rel < 1e-10 and worst_gap <= 1e-12 and lams == {0.0, 0.01, 0.5}
    report(1, "reduced = general residual at u*, grid never beats u*",
           ok, f"max rel err {worst_rel:.2e}, max(H(u*) - grid min) {worst_gap:.2e}")


def _rel(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_criterion_2_derivatives(report):
    rng = np.random.default_rng(7)
    # lam = 0 keeps R + lam^2 G^T hess G positive definite for arbitrary random nets
    problem = get_builtin("linear2", lam=0.0)
    first, second, sym, pgrad = 0.0, 0.0, 0.0, 0.0
    for i in range(100):
        kind = "lstm" if i % 4 == 3 else "fc"
        n = 2 if i % 5 == 0 else int(rng.integers(1, 5))
        net = random_net(kind, n=n, hidden=(int(rng.integers(3, 9)),) * 2, seed=i, scale=0.3)
        state = None
        if kind == "lstm":
            _, state = net.jet(np.array([0.1]), rng.standard_normal((1, n)), net.initial_state(1), order=0)
        t, x = float(rng.uniform(0, 1)), rng.standard_normal(n)
        d = de.eval_with_input_derivatives(net, t, x, state=state)
        fd = de.central_difference_bundle(net, t, x, 1e-4, state=state)
        first = max(first, _rel(np.append(d.grad_x, d.dt), np.append(fd.grad_x, fd.dt)))
        second = max(second, _rel(d.hess_x, fd.hess_x))
        sym = max(sym, float(np.max(np.abs(d.hess_x - d.hess_x.T))))
        if kind == "fc" and n == 2:
            pgrad = max(pgrad, _param_gradient_error(problem, net, rng))
    ok = first < 1e-5 and second < 1e-3 and sym < 1e-10 and pgrad < 1e-4
    report(2, "analytic vs central differences on 100 (net, point) pairs", ok,
           f"first {first:.1e}, second {second:.1e}, symmetry {sym:.1e}, residual-loss gradient {pgrad:.1e}")


def _param_gradient_error(problem, net, rng):
    t, x = np.array([rng.uniform(0, 1)]), rng.standard_normal((1, 2))
    cfg = net.config

    def loss(q):
        d = de.bundle_from_jet(Network(cfg, q).jet(t, x, order=2)[0])
        r = hjb.hamiltonian_reduced(d, problem.form.at(t, x), problem.form.L(t, x))
        return tn.sum_(r * r)

    g = de.param_gradient(loss, net.params)
    worst, h = 0.0, 1e-5
    for i in rng.choice(len(net.params), 4, replace=False):
        up, dn = net.params.copy(), net.params.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        fd = (float(tn.value(loss(up))) - float(tn.value(loss(dn)))) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / max(abs(fd), abs(g[i]), 1.0))
    return worst


def test_criterion_3_riccati(report):
    QT, R, T = 3.0, 0.5, 2.0
    g = TimeGrid(0.0, T, 40)
    sol = riccati_solve(0.0, 1.0, 0.0, 0.0, R, QT, g)
    closed = float(np.max(np.abs(sol.P[:, 0, 0] - 1.0 / (1.0 / QT + 2.0 * (T - g.nodes) / R))))
    p = get_builtin("linear2", lam=0.0)
    grid = TimeGrid(p.t0, p.T, p.N)
    sol = riccati_for_problem(p, grid)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(0, grid.N + 1))
        x = rng.normal(size=(1, p.n))
        t = np.full(1, grid.nodes[k])
        d = lqr_value(sol, grid.nodes[k], x)
        a = p.form.at(t, x)
        u = hjb.explicit_control(d, a.G, a.R, a.lam)
        gen = p.general
        worst = max(worst, abs(float(hjb.hamiltonian_general(d, gen.b(t, x, u), gen.sigma(t, x, u), gen.phi(t, x, u))[0])))
    report(3, "Riccati closed form and zero residual of the LQR bundle", closed < 1e-8 and worst < 1e-6,
           f"closed-form error {closed:.1e}, max |residual| {worst:.1e}")


def test_criterion_4_lqr_training_oracle(report):
    cfg = TrainConfig(problem="linear2", problem_overrides={"n": 1, "lam": 0.0}, algorithm="onenet", arch="fc",
                      N=100, M=50, max_iters=2000, learning_rate=1e-3, seed=0)
    problem = cfg.resolve_problem()
    grid = cfg.grid(problem)
    r = train(cfg, problem)
    assert r.ok, r.error
    sol = riccati_for_problem(problem, grid)
    b = _eval_batch(problem, "onenet", r, paths=problem.M, grid=grid)
    q_ref = np.stack([lqr_value(sol, t, b.states[:, k]).value for k, t in enumerate(grid.nodes)], axis=1)
    rel = float(np.mean(np.abs(b.values - q_ref) / (1.0 + np.abs(q_ref))))
    learned = monte_carlo_cost(problem, make_policy(problem, "onenet", r.value_net()), 1000, 0, grid=grid)
    optimal = monte_carlo_cost(problem, LQRPolicy(sol), 1000, 0, grid=grid)
    ratio = learned.mean / optimal.mean
    ok = rel < 0.05 and abs(ratio - 1.0) <= 0.10
    report(4, "scalar LQR value within 5% and cost within 10% of Riccati", ok,
           f"mean rel value error {rel:.4f} (N={grid.N}, K={cfg.max_iters}, baseline "
           f"{cfg.resolved_baseline(problem)}), cost ratio {ratio:.4f}")


def test_criterion_5_dt_trend(report):
    base = TrainConfig(problem="linear2", algorithm="onenet", max_iters=1000, learning_rate=1e-3)
    sweep = dt_sweep(base, [10, 20, 40], [1, 2, 3, 4, 5])
    means = [e.mean for e in sweep.entries]
    complete = all(len(e.seeds) == 5 for e in sweep.entries)
    ok = complete and all(a >= b for a, b in zip(means, means[1:]))
    detail = ", ".join(f"N={e.N}: {e.mean:.4g} +- {e.std:.2g} ({len(e.seeds)} seeds)" for e in sweep.entries)
    report(5, "mean final loss non-increasing in N", ok, detail)


def test_criterion_6_example1(report):
    cfg = TrainConfig(problem="example1", algorithm="twonet", max_iters=1000, seed=0)
    problem = cfg.resolve_problem()
    r = train(cfg, problem)
    assert r.ok, r.error
    xT = _eval_batch(problem, "twonet", r).states[:, -1, 0]
    m = float(xT.mean())
    report(6, "example1 two-network controller |mean x_T| < 0.2", abs(m) < 0.2,
           f"mean x_T {m:.4f}, std {xT.std(ddof=1):.4f} over {EVAL_PATHS} paths")


def test_criterion_7_pendulum(report):
    parts, ok = [], True
    for arch in ("fc", "lstm"):
        cfg = TrainConfig(problem="pendulum", algorithm="onenet", arch=arch, max_iters=1000, seed=0)
        problem = cfg.resolve_problem()
        untrained = train(replace(cfg, max_iters=0), problem)
        prior = float(np.abs(_eval_batch(problem, "onenet", untrained).states[:, -1, 0]).mean())
        r = train(cfg, problem)
        assert r.ok, r.error
        theta = float(np.abs(_eval_batch(problem, "onenet", r).states[:, -1, 0]).mean())
        ok &= theta < 0.2
        h = r.loss_history
        parts.append(f"{arch}: mean |theta_T| {theta:.4f} (untrained with prior {prior:.4f}), "
                     f"loss {np.mean(h[:20]):.3g} -> {np.mean(h[-20:]):.3g}")
    report(7, "pendulum mean |theta(T)| < 0.2 for FC and LSTM", ok, "; ".join(parts))


def test_criterion_8_statistics(report):
    g = TimeGrid(0.0, 1.0, 20)
    M = 10000
    w = sample_brownian(g, 1, M, seed=0).increments[:, :, 0]
    mean_ok = bool(np.all(np.abs(w.mean(axis=0)) < 4 * np.sqrt(g.dt / M)))
    var_dev = float(np.max(np.abs(w.var(axis=0, ddof=1) / g.dt - 1)))
    p = get_builtin("linear2", n=1, lam=0.0)
    grid = TimeGrid(p.t0, p.T, 50)
    pol = LQRPolicy(riccati_for_problem(p, grid))
    small = monte_carlo_cost(p, pol, 500, 1, grid=grid)
    big = monte_carlo_cost(p, pol, 2000, 1, grid=grid)
    halving = small.stderr / big.stderr
    ok = mean_ok and var_dev < 0.05 and abs(halving / 2 - 1) < 0.2
    report(8, "Brownian moments and Monte Carlo standard-error halving", ok,
           f"means within bound {mean_ok}, max variance deviation {var_dev:.3f}, stderr ratio 500/2000 {halving:.3f}")


def _same_outputs(first, second):
    a = json.load(open(os.path.join(first, "manifest.json")))
    b = json.load(open(os.path.join(second, "manifest.json")))
    same = set(a["outputs"]) == set(b["outputs"])
    for name in a["outputs"]:
        with open(os.path.join(first, name), "rb") as fa, open(os.path.join(second, name), "rb") as fb:
            same &= fa.read() == fb.read()
    return same, sorted(a["outputs"])


def test_criterion_9_reproducibility(report, tmp_path, capsys):
    checked, ok = [], True
    for algo, problem in (("onenet", "pendulum"), ("twonet", "example1")):
        run = tmp_path / algo
        codes = [
            main(["-q", "train", "--problem", problem, "--algo", algo, "--iters", "20", "--seed", "3",
                  "--outdir", str(run / "train")]),
            main(["-q", "rerun", str(run / "train" / "manifest.json"), "--outdir", str(run / "train2")]),
            main(["-q", "eval", "--checkpoint", str(run / "train"), "--paths", "5", "--seed", "1",
                  "--outdir", str(run / "eval")]),
            main(["-q", "rerun", str(run / "eval" / "manifest.json"), "--outdir", str(run / "eval2")]),
        ]
        capsys.readouterr()
        ok &= codes == [0, 0, 0, 0]
        for first, second in (("train", "train2"), ("eval", "eval2")):
            same, names = _same_outputs(run / first, run / second)
            ok &= same
            checked.append(f"{algo} {first} {'identical' if same else 'DIFFERENT'} ({', '.join(names)})")
    report(9, "reruns from manifests are byte-identical", ok, "; ".join(checked))
