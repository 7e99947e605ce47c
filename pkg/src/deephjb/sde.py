"""Time grids, seeded Brownian increments and Euler-Maruyama rollouts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RolloutDivergence, ShapeError

DIVERGENCE_BOUND = 1e8


@dataclass(frozen=True, eq=False)
class TimeGrid:
    t0: float
    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N}")
        if not self.T > self.t0:
            raise ConfigError("time grid needs T > t0")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self):
        return (self.T - self.t0) / self.N

    @property
    def nodes(self):
        nodes = self.t0 + self.dt * np.arange(self.N + 1)
        nodes[-1] = self.T
        return nodes

    @classmethod
    def from_nodes(cls, nodes, tol=1e-12):
        """Accept only evenly spaced node vectors."""
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigError("a time grid needs at least two nodes")
        steps = np.diff(nodes)
        if np.max(np.abs(steps - steps.mean())) > tol * max(1.0, abs(steps.mean())):
            raise ConfigError("only uniform time grids are supported")
        return cls(float(nodes[0]), float(nodes[-1]), nodes.size - 1)

    def same_as(self, other):
        return self.t0 == other.t0 and self.T == other.T and self.N == other.N

    def to_dict(self):
        return {"t0": self.t0, "T": self.T, "N": self.N}


def grid_for(problem, N=None):
    return TimeGrid(problem.t0, problem.T, N or problem.N)


# ---------------------------------------------------------------------------
# noise

TRAIN_STREAM = 1
EVAL_STREAM = 2
LOSS_EVAL_STREAM = 3


def path_generator(seed, path, stream=()):
    """Independent generator for one path; streams separate training/evaluation noise."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream) + (int(path),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True, eq=False)
class BrownianBatch:
    increments: np.ndarray  # (M, N, d_hat)
    seed: int
    dt: float
    path_ids: np.ndarray = None

    @property
    def paths(self):
        return self.increments.shape[0]

    def select(self, idx):
        ids = self.path_ids if self.path_ids is not None else np.arange(self.paths)
        return BrownianBatch(self.increments[idx], self.seed, self.dt, ids[idx])


def sample_brownian(grid, channels, paths, seed, stream=(), path_ids=None):
    """I.i.d. N(0, dt) increments, one independent stream per path id."""
    if channels < 1 or paths < 1:
        raise ConfigError("channels and paths must be positive")
    ids = np.arange(paths) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    scale = np.sqrt(grid.dt)
    inc = np.empty((ids.size, grid.N, channels))
    for k, pid in enumerate(ids):
        inc[k] = scale * path_generator(seed, pid, stream).standard_normal((grid.N, channels))
    return BrownianBatch(inc, int(seed), grid.dt, ids)


# ---------------------------------------------------------------------------
# integration


def euler_step(b, sigma, x, dt, dW):
    """``x + b dt + sigma dW`` for a single state or a batch."""
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if b.shape != x.shape or sigma.shape[:-1] != x.shape or sigma.shape[-1] != dW.shape[-1] \
            or dW.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"inconsistent shapes: x{x.shape} b{b.shape} sigma{sigma.shape} dW{dW.shape}")
    return x + b * dt + np.einsum("...ij,...j->...i", sigma, dW)


@dataclass(eq=False)
class PathBatch:
    states: np.ndarray  # (M, N+1, n)
    controls: np.ndarray  # (M, N+1, m)
    grid: TimeGrid
    increments: BrownianBatch
    values: np.ndarray = None  # (M, N+1) when the policy exposes q

    @property
    def paths(self):
        return self.states.shape[0]

    def path(self, i):
        return PathBatch(
            self.states[i : i + 1],
            self.controls[i : i + 1],
            self.grid,
            self.increments.select(slice(i, i + 1)),
            None if self.values is None else self.values[i : i + 1],
        )


def rollout(problem, policy, grid, noise, bound=DIVERGENCE_BOUND):
    """Simulate ``noise.paths`` trajectories from ``problem.x0`` under ``policy``.

    ``policy`` is called as ``policy(t, x) -> u`` with x of shape (M, n) after
    ``policy.reset(M)`` (when it has one).  The control is also recorded at the
    final node so arrays stay rectangular.
    """
    M = noise.paths
    if noise.increments.shape[1:] != (grid.N, problem.d_hat):
        raise ShapeError(
            f"noise has shape {noise.increments.shape[1:]}, grid/problem need {(grid.N, problem.d_hat)}"
        )
    if not np.isclose(noise.dt, grid.dt, rtol=0, atol=1e-14):
        raise ShapeError("noise was sampled on a different grid spacing")
    g = problem.general
    t_nodes = grid.nodes
    states = np.empty((M, grid.N + 1, problem.n))
    controls = np.empty((M, grid.N + 1, problem.m))
    values = None
    x = np.tile(problem.x0, (M, 1))
    states[:, 0] = x
    if hasattr(policy, "reset"):
        policy.reset(M)
    for k in range(grid.N + 1):
        t = t_nodes[k]
        u = np.asarray(policy(t, x), dtype=np.float64).reshape(M, problem.m)
        controls[:, k] = u
        q = getattr(policy, "last_value", None)
        if q is not None:
            if values is None:
                values = np.full((M, grid.N + 1), np.nan)
            values[:, k] = q
        if k == grid.N:
            break
        tb = np.full(M, t)
        x = euler_step(g.b(tb, x, u), g.sigma(tb, x, u), x, grid.dt, noise.increments[:, k])
        bad = ~np.all(np.isfinite(x) & (np.abs(x) <= bound), axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise RolloutDivergence(f"path {i} diverged at step {k + 1} (t={t_nodes[k + 1]:.6g})", path=i, step=k + 1)
        states[:, k + 1] = x
    return PathBatch(states, controls, grid, noise, values)


# ---------------------------------------------------------------------------
# CSV export


def trajectory_header(n, m):
    return ["run_id", "path_id", "step", "t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)] + ["q"]


def _fmt(v):
    return format(float(v), ".17g")


def paths_to_csv(batches, run_ids=None):
    """Trajectory CSV text (17 significant digits) for one or more PathBatches."""
    if isinstance(batches, PathBatch):
        batches = [batches]
    run_ids = list(range(len(batches))) if run_ids is None else list(run_ids)
    first = batches[0]
    n, m = first.states.shape[2], first.controls.shape[2]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trajectory_header(n, m))
    for rid, pb in zip(run_ids, batches):
        ids = pb.increments.path_ids if pb.increments.path_ids is not None else np.arange(pb.paths)
        nodes = pb.grid.nodes
        for i in range(pb.paths):
            for k in range(pb.grid.N + 1):
                q = "" if pb.values is None else _fmt(pb.values[i, k])
                w.writerow(
                    [rid, int(ids[i]), k, _fmt(nodes[k])]
                    + [_fmt(v) for v in pb.states[i, k]]
                    + [_fmt(v) for v in pb.controls[i, k]]
                    + [q]
                )
    return buf.getvalue()
