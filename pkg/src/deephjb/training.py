"""The 2-network and 1-network training loops.

Every iteration simulates fresh paths under the current parameters, scores
them with the physics-informed loss and takes one optimizer step.  Paths are
treated as data: gradients flow through the network evaluations at the path
nodes, not through the Euler recursion that produced the nodes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffengine as de
from . import hjb
from .errors import ConditioningError, ConfigError, NumericError, RolloutDivergence
from .networks import Network, NetworkParams, control_config, init_network, value_config
from .policies import ControlNetPolicy, ExplicitPolicy
from .problems import ProblemSpec, get_builtin, problem_from_config
from .sde import LOSS_EVAL_STREAM, TRAIN_STREAM, grid_for, rollout, sample_brownian

log = logging.getLogger(__name__)

ALGORITHMS = ("twonet", "onenet")
OPTIMIZERS = ("adam", "sgd")
BASELINES = ("auto", "none", "unit", "terminal", "lqr")
CONTROL_UPDATES = ("residual", "hamiltonian")
MINIBATCH_STREAM = 4

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(params, grad, state, lr):
    """One update; returns ``(params', state')`` without touching the inputs.

    ``params`` may be a flat ndarray or a NetworkParams.
    """
    flat = params.flat if isinstance(params, NetworkParams) else params
    flat = np.asarray(flat, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != flat.shape:
        raise ConfigError(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at optimizer step {state.step}")
    if state.kind == "sgd":
        new = flat - lr * grad
        state = OptimizerState("sgd", state.step + 1)
    elif state.kind == "adam":
        m = np.zeros_like(flat) if state.m is None else state.m
        v = np.zeros_like(flat) if state.v is None else state.v
        k = state.step + 1
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
        mhat = m / (1 - ADAM_BETA1**k)
        vhat = v / (1 - ADAM_BETA2**k)
        new = flat - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        state = OptimizerState("adam", k, m, v)
    else:
        raise ConfigError(f"unknown optimizer {state.kind!r}; expected one of {OPTIMIZERS}")
    if isinstance(params, NetworkParams):
        return params.with_flat(new), state
    return new, state


# ---------------------------------------------------------------------------
# configuration


def linearize_at_target(problem):
    """``(A, B)`` of the control-affine drift linearized at the target state."""
    f = problem.form
    xt = problem.cost.x_target
    h = 1e-6
    eye = np.eye(problem.n)
    A = (f.F(0.0, xt + h * eye) - f.F(0.0, xt - h * eye)).T / (2 * h)
    return A, f.G(0.0, xt[None, :])[0]


def steady_state_riccati(A, B, Q, R, lam=0.0, iters=200, tol=1e-12):
    """Stabilizing solution of ``A^T P + P A - 2 P B Rt^-1 B^T P + Q = 0``, or None.

    ``Rt = R + 2 lam^2 B^T P B``; each sweep freezes Rt and takes the stable
    invariant subspace of the Hamiltonian matrix.
    """
    n = A.shape[0]
    P = np.zeros((n, n))
    for _ in range(iters if lam else 1):
        Rt = R + 2.0 * lam**2 * B.T @ P @ B
        S = 2.0 * B @ np.linalg.solve(Rt, B.T)
        w, V = np.linalg.eig(np.block([[A, -S], [-Q, -A.T]]))
        stable = V[:, w.real < 0]
        if stable.shape[1] != n or np.linalg.cond(stable[:n]) > 1e12:
            return None
        P_new = np.real(stable[n:] @ np.linalg.inv(stable[:n]))
        P_new = 0.5 * (P_new + P_new.T)
        done = np.max(np.abs(P_new - P)) <= tol * (1.0 + np.max(np.abs(P_new)))
        P = P_new
        if done:
            break
    if not np.all(np.isfinite(P)) or np.min(np.linalg.eigvalsh(P)) < -1e-9:
        return None
    return P


def euler_stable_under_quadratic(problem, hess, dt):
    """Spectral radius test of one Euler step, linearized at the target, under the
    explicit control of a value function with constant Hessian ``hess``."""
    A, G = linearize_at_target(problem)
    f = problem.form
    Rt = f.R + f.lam**2 * G.T @ hess @ G
    J = A - G @ np.linalg.solve(Rt, G.T @ hess)
    return float(np.max(np.abs(np.linalg.eigvals(np.eye(problem.n) + dt * J)))) < 1.0


def baseline_matrix(problem, name):
    """Weight ``S`` of the quadratic prior ``(x - x*)^T S (x - x*)``, or None."""
    if name == "terminal":
        return problem.cost.Q_T
    if name == "unit":
        return np.eye(problem.n)
    if name == "lqr":
        A, B = linearize_at_target(problem)
        return steady_state_riccati(A, B, problem.cost.Q, problem.form.R, problem.form.lam)
    return None


@dataclass
class TrainConfig:
    problem: object = "linear2"  # builtin name, config dict or ProblemSpec
    problem_overrides: dict = field(default_factory=dict)
    algorithm: str = "onenet"
    arch: str = "fc"
    hidden: tuple | None = None
    N: int | None = None
    M: int | None = None
    batch_size: int | None = None
    max_iters: int = 1000
    learning_rate: float | None = None
    optimizer: str = "adam"
    seed: int = 0
    resample_noise: bool = True
    ridge: float = 0.0
    control_update: str = "residual"
    control_bound: float | None = None
    output_scale: float = 0.0
    value_gain: float = 1.0
    baseline: str = "auto"

    def resolve_problem(self):
        p = self.problem
        if isinstance(p, ProblemSpec):
            spec = p
            if self.problem_overrides:
                from .problems import with_overrides

                spec = with_overrides(spec, **self.problem_overrides)
        elif isinstance(p, dict):
            spec = problem_from_config({**p, "params": {**p.get("params", {}), **self.problem_overrides}})
        else:
            spec = get_builtin(p, **self.problem_overrides)
        return spec

    def validate(self, problem=None):
        problem = problem or self.resolve_problem()
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.control_update not in CONTROL_UPDATES:
            raise ConfigError(f"unknown control_update {self.control_update!r}; expected one of {CONTROL_UPDATES}")
        if self.algorithm == "onenet" and not problem.is_affine:
            raise ConfigError(
                f"problem {problem.name!r} is not control-affine, so the explicit control is unavailable; use twonet"
            )
        M = self.paths(problem)
        if M < 1:
            raise ConfigError("M must be positive")
        if not 1 <= self.batch(problem) <= M:
            raise ConfigError(f"batch size must be in [1, M={M}]")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")
        if self.lr(problem) <= 0:
            raise ConfigError("learning rate must be positive")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if self.ridge < 0:
            raise ConfigError("ridge must be non-negative")
        return problem

    def paths(self, problem):
        return int(self.M or problem.M)

    def batch(self, problem):
        return int(self.batch_size or self.paths(problem))

    def lr(self, problem):
        return float(self.learning_rate if self.learning_rate is not None else problem.lr)

    def grid(self, problem):
        return grid_for(problem, self.N)

    def network_configs(self, problem):
        s_value, s_control = (int(v) for v in np.random.SeedSequence(self.seed).generate_state(2))
        quad = None
        name = self.resolved_baseline(problem)
        S = baseline_matrix(problem, name)
        if name == "lqr" and S is None:
            raise ConfigError(f"no stabilizing steady-state Riccati solution for {problem.name!r}")
        if S is not None:
            quad = {"Q": S, "center": problem.cost.x_target}
        vc = value_config(problem.n, self.arch, self.hidden, s_value, self.output_scale, self.value_gain, quad)
        cc = None
        if self.algorithm == "twonet":
            cc = control_config(problem.n, problem.m, self.arch, self.hidden, s_control, self.control_bound)
        return vc, cc

    def resolved_baseline(self, problem):
        """``auto`` picks the first of lqr, terminal, unit, none whose initial
        explicit policy keeps the Euler scheme stable near the target; problems
        without an explicit policy get unit."""
        if self.baseline != "auto":
            return self.baseline
        if not problem.is_affine:
            return "unit"
        dt = self.grid(problem).dt
        for name in ("lqr", "terminal", "unit"):
            S = baseline_matrix(problem, name)
            if S is not None and euler_stable_under_quadratic(problem, 2.0 * S, dt):
                return name
        return "none"

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if isinstance(self.problem, ProblemSpec):
            d["problem"] = self.problem.to_config()
        d["problem_overrides"] = dict(self.problem_overrides)
        d["hidden"] = None if self.hidden is None else list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("hidden") is not None:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainReport:
    loss_history: list
    value_config: object
    value_params: NetworkParams
    control_config: object
    control_params: NetworkParams | None
    seed: int
    config: dict
    status: str = "ok"
    error: str | None = None
    error_type: str | None = None
    failed_iteration: int | None = None
    wall_time: float = 0.0

    @property
    def ok(self):
        return self.status == "ok"

    def value_net(self):
        return Network(self.value_config, self.value_params)

    def control_net(self):
        return None if self.control_config is None else Network(self.control_config, self.control_params)

    def to_dict(self):
        """JSON-ready summary; wall time is left out so reruns compare equal."""
        return {
            "status": self.status,
            "error": self.error,
            "error_type": self.error_type,
            "failed_iteration": self.failed_iteration,
            "seed": self.seed,
            "iterations": len(self.loss_history),
            "loss_history": [float(v) for v in self.loss_history],
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# loss evaluation


def make_policy(problem, algorithm, value_net, control_net=None, ridge=0.0):
    if algorithm == "onenet":
        return ExplicitPolicy(problem, value_net, ridge)
    return ControlNetPolicy(control_net, value_net)


def _value_loss(problem, algorithm, paths, vcfg, ccfg, ridge):
    if algorithm == "onenet":
        def loss(vp):
            return hjb.batch_loss(hjb.path_terms_1net(problem, Network(vcfg, vp), paths, ridge))
    else:
        def loss(vp, cp):
            return hjb.batch_loss(hjb.path_terms_2net(problem, Network(vcfg, vp), Network(ccfg, cp), paths))
    return loss


def loss_on_paths(problem, algorithm, value_net, control_net, paths, ridge=0.0):
    """Batch loss (mean of per-path losses) as a float."""
    if algorithm == "onenet":
        terms = hjb.path_terms_1net(problem, value_net, paths, ridge)
    else:
        terms = hjb.path_terms_2net(problem, value_net, control_net, paths)
    return float(hjb.batch_loss(terms))


def evaluate_loss(problem, report, grid=None, paths=None, seed=None, ridge=None):
    """Loss of the report's final parameters on a fixed evaluation batch.

    The batch is simulated under the trained policy with noise from a stream
    disjoint from training, so final losses are comparable across runs.
    """
    cfg = TrainConfig.from_dict(report.config)
    grid = grid or cfg.grid(problem)
    paths = paths or cfg.paths(problem)
    seed = report.seed if seed is None else seed
    ridge = cfg.ridge if ridge is None else ridge
    vnet, cnet = report.value_net(), report.control_net()
    noise = sample_brownian(grid, problem.d_hat, paths, seed, stream=(LOSS_EVAL_STREAM,))
    batch = rollout(problem, make_policy(problem, cfg.algorithm, vnet, cnet, ridge), grid, noise)
    return loss_on_paths(problem, cfg.algorithm, vnet, cnet, batch, ridge)


# ---------------------------------------------------------------------------
# training


def train(config, problem=None, log_every=0, callback=None):
    """Run the configured solver; failures end the run and are recorded in the report."""
    problem = config.validate(problem)
    t_start = time.perf_counter()
    grid = config.grid(problem)
    M, B, lr = config.paths(problem), config.batch(problem), config.lr(problem)
    vcfg, ccfg = config.network_configs(problem)
    vparams = init_network(vcfg)
    cparams = init_network(ccfg) if ccfg is not None else None
    vstate = OptimizerState(config.optimizer)
    cstate = OptimizerState(config.optimizer)
    picker = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(MINIBATCH_STREAM,))))
    history = []
    report = TrainReport(history, vcfg, vparams, ccfg, cparams, config.seed, config.to_dict())
    loss_fn_for = lambda paths: _value_loss(problem, config.algorithm, paths, vcfg, ccfg, config.ridge)  # noqa: E731

    for k in range(config.max_iters):
        try:
            idx = np.arange(M) if B == M else np.sort(picker.choice(M, size=B, replace=False))
            stream = (TRAIN_STREAM, k if config.resample_noise else 0)
            noise = sample_brownian(grid, problem.d_hat, B, config.seed, stream=stream, path_ids=idx)
            vnet = Network(vcfg, vparams)
            cnet = Network(ccfg, cparams) if ccfg is not None else None
            paths = rollout(problem, make_policy(problem, config.algorithm, vnet, cnet, config.ridge), grid, noise)
            loss_fn = loss_fn_for(paths)
            if config.algorithm == "onenet":
                val, (gv,) = de.param_gradients(loss_fn, [vparams])
            else:
                val, (gv, gc) = de.param_gradients(loss_fn, [vparams, cparams])
                if config.control_update == "hamiltonian":
                    d = hjb.node_bundles(vnet, paths.states, grid.nodes).detach()
                    _, (gc,) = de.param_gradients(
                        lambda cp: hjb.control_objective(problem, d, Network(ccfg, cp), paths), [cparams]
                    )
            history.append(val)
            vparams, vstate = optimizer_step(vparams, gv, vstate, lr)
            if cparams is not None:
                cparams, cstate = optimizer_step(cparams, gc, cstate, lr)
        except (NumericError, ConditioningError, RolloutDivergence) as exc:
            report.status = "failed"
            report.error = f"iteration {k}: {exc}"
            report.error_type = type(exc).__name__
            report.failed_iteration = k
            log.warning("training stopped: %s", report.error)
            break
        report.value_params, report.control_params = vparams, cparams
        if callback is not None:
            callback(k, report)
        if log_every and (k % log_every == 0 or k == config.max_iters - 1):
            log.info("iter %d loss %.6g", k, val)
    report.wall_time = time.perf_counter() - t_start
    return report
