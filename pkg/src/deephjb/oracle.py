"""Reference solutions and evaluation: Riccati LQR oracle, brute-force
Hamiltonian minimization, Monte Carlo costs, run statistics and the
time-step sweep."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .diffengine import DerivativeBundle
from .errors import ConditioningError, ConfigError, DeepHJBError, ShapeError
from .sde import EVAL_STREAM, TimeGrid, grid_for, rollout, sample_brownian


# ---------------------------------------------------------------------------
# Riccati oracle (lambda = 0)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray  # (N+1, n, n)
    c: np.ndarray  # (N+1,)
    A: np.ndarray
    G: np.ndarray
    Hm: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_target: np.ndarray

    def rhs(self, P):
        """``-dP/dt``."""
        return _riccati_rhs(P, self.A, _gain_matrix(self.G, self.R), self.Q)

    def node(self, t, tol=1e-9):
        nodes = self.grid.nodes
        k = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[k] - t) > tol * max(1.0, abs(t)):
            raise ConfigError(f"t={t} is not a node of the Riccati grid")
        return k


def _gain_matrix(G, R):
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("R is not positive definite", min_eigenvalue=float(np.linalg.eigvalsh(R).min())) from exc
    Y = np.linalg.solve(L, G.T)  # L^{-1} G^T
    return Y.T @ Y  # G R^{-1} G^T


def _riccati_rhs(P, A, S, Q):
    return A.T @ P + P @ A - 2.0 * P @ S @ P + Q


def _rk4_step(P, c, h, A, S, Q, HH):
    k1 = _riccati_rhs(P, A, S, Q)
    P2 = P + 0.5 * h * k1
    k2 = _riccati_rhs(P2, A, S, Q)
    P3 = P + 0.5 * h * k2
    k3 = _riccati_rhs(P3, A, S, Q)
    P4 = P + h * k3
    k4 = _riccati_rhs(P4, A, S, Q)
    # -c' = tr(P HH^T) with the same stage values
    dc = np.trace(P @ HH) + 2 * np.trace(P2 @ HH) + 2 * np.trace(P3 @ HH) + np.trace(P4 @ HH)
    return P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), c + h / 6.0 * dc


def riccati_solve(A, G, Hm, Q, R, Q_T, grid, x_target=None, max_step_rate=0.02):
    """Integrate ``-P' = A^T P + P A - 2 P G R^{-1} G^T P + Q`` and
    ``-c' = tr(P Hm Hm^T)`` backward from ``P(T) = Q_T``, ``c(T) = 0`` with RK4.

    The value function is ``q(t, x) = (x - x*)^T P(t) (x - x*) + c(t)``.
    Each grid interval takes as many RK4 substeps as needed to keep
    ``step * stiffness`` below ``max_step_rate``.
    """
    A, G, Hm, Q, R, Q_T = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (A, G, Hm, Q, R, Q_T))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n) or Q_T.shape != (n, n) or G.shape[0] != n or Hm.shape[0] != n:
        raise ShapeError("inconsistent Riccati dimensions")
    if R.shape != (G.shape[1], G.shape[1]):
        raise ShapeError("R must be m x m")
    S = _gain_matrix(G, R)
    HH = Hm @ Hm.T
    h = grid.dt
    N = grid.N
    P = np.empty((N + 1, n, n))
    c = np.empty(N + 1)
    P[N], c[N] = Q_T, 0.0
    normA = np.linalg.norm(A, 2)
    normS = np.linalg.norm(S, 2)
    for k in range(N, 0, -1):
        # backward time s = T - t turns the equation into a forward one; stiff
        # intervals are split so each RK4 stage stays well inside its stability region
        rate = 2.0 * normA + 4.0 * normS * np.linalg.norm(P[k], 2)
        sub = max(1, int(math.ceil(h * rate / max_step_rate)))
        Pk, ck = P[k], c[k]
        hs = h / sub
        for _ in range(sub):
            Pk, ck = _rk4_step(Pk, ck, hs, A, S, Q, HH)
        P[k - 1] = 0.5 * (Pk + Pk.T)
        c[k - 1] = ck
    xt = np.zeros(n) if x_target is None else np.asarray(x_target, dtype=np.float64)
    return RiccatiSolution(grid, P, c, A, G, Hm, Q, R, xt)


def lqr_value(sol, t, x):
    """Exact bundle of the quadratic value function at grid time ``t``."""
    k = sol.node(float(t))
    P = sol.P[k]
    x = np.asarray(x, dtype=np.float64)
    dev = x - sol.x_target
    HH = sol.Hm @ sol.Hm.T
    Pdot = -sol.rhs(P)
    cdot = -np.trace(P @ HH)
    value = np.einsum("...i,ij,...j->...", dev, P, dev) + sol.c[k]
    dt = np.einsum("...i,ij,...j->...", dev, Pdot, dev) + cdot
    grad = 2.0 * dev @ P
    hess = np.broadcast_to(2.0 * P, dev.shape[:-1] + P.shape).copy()
    return DerivativeBundle(value, dt, grad, hess)


def linear_problem_matrices(problem):
    """``(A, G, H)`` of a problem with linear drift and constant G, H; checked numerically."""
    if not problem.is_affine:
        raise ConfigError(f"problem {problem.name!r} is not control-affine")
    n = problem.n
    f = problem.form
    xt = problem.cost.x_target
    eye = np.eye(n)
    base = f.F(0.0, xt[None, :])[0]
    A = (f.F(0.0, xt + eye) - base).T
    G = f.G(0.0, xt[None, :])[0]
    H = f.H(0.0, xt[None, :])[0]
    rng = np.random.default_rng(0)
    x = xt + rng.normal(size=(8, n))
    t = rng.uniform(problem.t0, problem.T, size=8)
    if not (
        np.allclose(f.F(t, x), base + (x - xt) @ A.T, atol=1e-10)
        and np.allclose(f.G(t, x), G, atol=1e-12)
        and np.allclose(f.H(t, x), H, atol=1e-12)
        and np.allclose(base, 0.0, atol=1e-12)
    ):
        raise ConfigError(f"problem {problem.name!r} is not linear about its target with constant G and H")
    return A, G, H


def riccati_for_problem(problem, grid=None):
    """Riccati oracle for a linear problem without control-dependent noise."""
    if problem.lam is None or problem.lam != 0.0:
        raise ConfigError("the Riccati oracle needs lambda = 0")
    A, G, H = linear_problem_matrices(problem)
    grid = grid or grid_for(problem)
    c = problem.cost
    return riccati_solve(A, G, H, c.Q, c.R, c.Q_T, grid, c.x_target)


class LQRPolicy:
    """Optimal feedback ``u = -R^{-1} G^T 2 P(t) (x - x*)``; only valid at grid nodes."""

    def __init__(self, sol):
        self.sol = sol
        self.K = np.stack([np.linalg.solve(sol.R, sol.G.T @ (2.0 * P)) for P in sol.P])
        self.last_value = None

    def __call__(self, t, x):
        k = self.sol.node(float(t))
        dev = x - self.sol.x_target
        self.last_value = np.einsum("bi,ij,bj->b", dev, self.sol.P[k], dev) + self.sol.c[k]
        return -dev @ self.K[k].T


# ---------------------------------------------------------------------------
# brute-force minimization of the control Hamiltonian


def grid_min_hamiltonian(d, a, radius=5.0, points_per_axis=41, L_val=0.0):
    """Minimize the control Hamiltonian over the grid ``[-radius, radius]^m``.

    ``a`` is an affine form evaluated at a single point (F (n,), G (n, m), H (n, d)).
    """
    G = np.atleast_2d(np.asarray(a.G, dtype=np.float64))
    m = G.shape[1]
    if m > 3:
        raise ConfigError(f"grid search over {m} control dimensions is not supported (m <= 3)")
    axis = np.linspace(-radius, radius, points_per_axis)
    U = np.array(list(itertools.product(axis, repeat=m)))  # (P, m)
    grad = np.asarray(d.grad_x, dtype=np.float64)
    hess = np.asarray(d.hess_x, dtype=np.float64)
    H = np.asarray(a.H, dtype=np.float64)
    GU = U @ G.T  # (P, n)
    drift = (np.asarray(a.F) + GU) @ grad
    quad_u = 0.5 * a.lam**2 * np.einsum("pi,ij,pj->p", GU, hess, GU)
    noise = 0.5 * np.sum(hess * (H @ H.T))
    values = drift + quad_u + noise + L_val + 0.5 * np.einsum("pi,ij,pj->p", U, a.R, U)
    k = int(np.argmin(values))
    return U[k], float(values[k])


# ---------------------------------------------------------------------------
# Monte Carlo cost


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std: float
    paths: int

    @property
    def stderr(self):
        return self.std / math.sqrt(self.paths)

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "paths": self.paths, "stderr": self.stderr}


def path_costs(problem, batch):
    """Running cost by the left-endpoint rule plus terminal cost, per path."""
    M, K, n = batch.states.shape
    g = problem.general
    nodes = batch.grid.nodes
    run = np.zeros(M)
    for k in range(K - 1):
        run += np.asarray(g.phi(np.full(M, nodes[k]), batch.states[:, k], batch.controls[:, k])) * batch.grid.dt
    return run + np.asarray(g.psi(batch.states[:, -1]))


def monte_carlo_cost(problem, policy, paths, seed, grid=None, stream=(EVAL_STREAM,)):
    """Sample mean and standard deviation of the cost over fresh rollouts."""
    if paths < 2:
        raise ConfigError("monte_carlo_cost needs at least 2 paths")
    grid = grid or grid_for(problem)
    noise = sample_brownian(grid, problem.d_hat, paths, seed, stream=stream)
    costs = path_costs(problem, rollout(problem, policy, grid, noise))
    return CostEstimate(float(costs.mean()), float(costs.std(ddof=1)), int(paths))


# ---------------------------------------------------------------------------
# statistics over runs


@dataclass(frozen=True, eq=False)
class RunStatistics:
    grid: TimeGrid
    samples: int
    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray
    value_mean: np.ndarray | None = None
    value_std: np.ndarray | None = None

    def to_csv(self):
        n, m = self.state_mean.shape[1], self.control_mean.shape[1]
        head = ["step", "t"]
        head += [f"x{i}_{s}" for i in range(n) for s in ("mean", "std")]
        head += [f"u{j}_{s}" for j in range(m) for s in ("mean", "std")]
        if self.value_mean is not None:
            head += ["q_mean", "q_std"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        fmt = lambda v: format(float(v), ".17g")  # noqa: E731
        for k, t in enumerate(self.grid.nodes):
            row = [k, fmt(t)]
            for i in range(n):
                row += [fmt(self.state_mean[k, i]), fmt(self.state_std[k, i])]
            for j in range(m):
                row += [fmt(self.control_mean[k, j]), fmt(self.control_std[k, j])]
            if self.value_mean is not None:
                row += [fmt(self.value_mean[k]), fmt(self.value_std[k])]
            w.writerow(row)
        return buf.getvalue()


def run_statistics(runs):
    """Per-node mean and sample std across runs.

    ``runs`` is a list of PathBatch; every path of every run counts as one
    sample, so a list of single-path batches gives statistics across runs.
    """
    if not runs:
        raise ConfigError("run_statistics needs at least one run")
    grid = runs[0].grid
    for r in runs[1:]:
        if not r.grid.same_as(grid):
            raise ConfigError("runs were produced on different time grids")
    states = np.concatenate([r.states for r in runs], axis=0)
    controls = np.concatenate([r.controls for r in runs], axis=0)
    if states.shape[0] < 2:
        raise ConfigError("run_statistics needs at least 2 samples")
    have_values = all(r.values is not None for r in runs)
    values = np.concatenate([r.values for r in runs], axis=0) if have_values else None
    return RunStatistics(
        grid,
        states.shape[0],
        states.mean(axis=0),
        states.std(axis=0, ddof=1),
        controls.mean(axis=0),
        controls.std(axis=0, ddof=1),
        None if values is None else values.mean(axis=0),
        None if values is None else values.std(axis=0, ddof=1),
    )


# ---------------------------------------------------------------------------
# time-step sweep


@dataclass
class SweepEntry:
    N: int
    seeds: list
    mean: float | None
    std: float | None
    losses: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # [{"seed", "error"}]

    def to_dict(self):
        return {
            "N": self.N,
            "seeds": list(self.seeds),
            "final_loss_mean": self.mean,
            "final_loss_std": self.std,
            "final_losses": list(self.losses),
            "failures": list(self.failures),
        }


@dataclass
class SweepReport:
    entries: list

    def to_dict(self):
        return {"entries": [e.to_dict() for e in self.entries]}


def validate_n_list(N_list):
    try:
        Ns = [int(v) for v in N_list]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad N list {N_list!r}") from exc
    if not Ns or any(v < 1 for v in Ns) or any(float(a) != float(b) for a, b in zip(Ns, N_list)):
        raise ConfigError("N list must contain positive integers")
    if len(set(Ns)) != len(Ns):
        raise ConfigError("N list contains duplicates")
    return sorted(Ns)


def dt_sweep(base_config, N_list, seeds, trainer=None, final_loss=None):
    """Train at every N for every seed and collect final-loss statistics.

    A failing run is recorded on its entry and does not stop the sweep.
    ``trainer`` and ``final_loss`` default to the training module's
    ``train`` and ``evaluate_loss``.
    """
    from dataclasses import replace

    from . import training

    trainer = trainer or training.train
    final_loss = final_loss or training.evaluate_loss
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("dt_sweep needs at least one seed")
    problem = base_config.resolve_problem()
    entries = []
    for N in validate_n_list(N_list):
        ok_seeds, losses, failures = [], [], []
        for seed in seeds:
            cfg = replace(base_config, N=N, seed=seed)
            try:
                report = trainer(cfg, problem)
                if not report.ok:
                    failures.append({"seed": seed, "error": report.error})
                    continue
                loss = float(final_loss(problem, report))
                if not np.isfinite(loss):
                    raise DeepHJBError(f"final loss is not finite ({loss})")
            except DeepHJBError as exc:
                failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            ok_seeds.append(seed)
            losses.append(loss)
        mean = float(np.mean(losses)) if losses else None
        std = float(np.std(losses, ddof=1)) if len(losses) > 1 else (0.0 if losses else None)
        entries.append(SweepEntry(N, ok_seeds, mean, std, losses, failures))
    return SweepReport(entries)
