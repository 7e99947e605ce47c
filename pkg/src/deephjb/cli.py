"""Command-line front end: ``list``, ``train``, ``eval``, ``sweep`` and ``rerun``.

Every command prints one JSON document on stdout (``list`` prints a table
unless ``--json``).  Failures print ``{"error": ..., "message": ...,
"exit_code": ...}`` and exit with 2 (validation), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import CheckpointError, ConditioningError, ConfigError, DeepHJBError, NumericError, RolloutDivergence
from .fileio import atomic_write_text
from .networks import Network, load_checkpoint, save_checkpoint
from .oracle import dt_sweep, path_costs, run_statistics, validate_n_list
from .problems import BUILTINS, get_builtin, problem_from_config
from .sde import EVAL_STREAM, TimeGrid, paths_to_csv, rollout, sample_brownian
from .training import BASELINES, TrainConfig, make_policy, train

log = logging.getLogger("deephjb")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUTDIR_ENV = "DEEPHJB_OUTDIR"

# config key -> (parser, TrainConfig field or special handling)
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _bool(text):
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text

    return parse


def _num(kind):
    def parse(text):
        try:
            return kind(text)
        except (TypeError, ValueError):
            raise ConfigError(f"expected {kind.__name__}, got {text!r}") from None

    return parse


TRAIN_KEYS = {
    "problem": str,
    "algo": _choice("twonet", "onenet"),
    "arch": _choice("fc", "lstm"),
    "hidden": _ints,
    "N": _num(int),
    "M": _num(int),
    "batch": _num(int),
    "iters": _num(int),
    "lr": _num(float),
    "optimizer": _choice("adam", "sgd"),
    "lambda": _num(float),
    "seed": _num(int),
    "outdir": str,
    "resample_noise": _bool,
    # beyond the basic key set
    "ridge": _num(float),
    "control_update": _choice("residual", "hamiltonian"),
    "baseline": _choice(*BASELINES),
    "gain": _num(float),
}


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys are an error."""
    out, unknown = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in TRAIN_KEYS:
            unknown.append(key)
            continue
        out[key] = value
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return out


def typed_values(raw):
    unknown = sorted(set(raw) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: (TRAIN_KEYS[k](v) if isinstance(v, str) and TRAIN_KEYS[k] is not str else v) for k, v in raw.items()}


def train_config_from_values(values):
    """Build a TrainConfig from typed key/value settings."""
    problem = values.get("problem", "linear2")
    overrides = {}
    if "lambda" in values:
        overrides["lam"] = float(values["lambda"])
    cfg = TrainConfig(
        problem=problem,
        problem_overrides=overrides,
        algorithm=values.get("algo", "onenet"),
        arch=values.get("arch", "fc"),
        hidden=values.get("hidden"),
        N=values.get("N"),
        M=values.get("M"),
        batch_size=values.get("batch"),
        max_iters=int(values.get("iters", 1000)),
        learning_rate=values.get("lr"),
        optimizer=values.get("optimizer", "adam"),
        seed=int(values.get("seed", 0)),
        resample_noise=values.get("resample_noise", True),
        ridge=float(values.get("ridge", 0.0)),
        control_update=values.get("control_update", "residual"),
        baseline=values.get("baseline", "auto"),
        value_gain=float(values.get("gain", 1.0)),
    )
    problem_spec = cfg.resolve_problem()
    if "lambda" in values and not problem_spec.is_affine:
        raise ConfigError(f"problem {problem_spec.name!r} has no lambda parameter")
    cfg.validate(problem_spec)
    return cfg, problem_spec


# ---------------------------------------------------------------------------
# output helpers


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def prepare_outdir(path):
    """Create a fresh output directory; an existing non-empty one is a collision."""
    if os.path.exists(path):
        if not os.path.isdir(path) or os.listdir(path):
            raise FileExistsError(f"output directory {path!r} already exists and is not empty")
    else:
        os.makedirs(path)
    return os.path.abspath(path)


def default_outdir(kind):
    base = os.environ.get(OUTDIR_ENV, "deephjb-runs")
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    return os.path.join(base, f"{kind}-{stamp}")


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(outdir, command, config, seed, outputs, started, extra=None):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": {name: {"path": p, "sha256": _sha256(p)} for name, p in sorted(outputs.items())},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(outdir, "manifest.json")
    atomic_write_text(path, _dump(manifest))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_list(args):
    rows = []
    for name in sorted(BUILTINS):
        p = get_builtin(name)
        rows.append(
            {
                "name": name,
                "n": p.n,
                "m": p.m,
                "noise_dim": p.d_hat,
                "T": p.T,
                "N": p.N,
                "M": p.M,
                "lr": p.lr,
                "lambda": p.lam,
                "algorithms": ["onenet", "twonet"] if p.is_affine else ["twonet"],
            }
        )
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'name':<12}{'n':>4}{'m':>4}{'T':>6}{'N':>5}{'M':>5}{'lr':>9}  algorithms")
        for r in rows:
            print(
                f"{r['name']:<12}{r['n']:>4}{r['m']:>4}{r['T']:>6g}{r['N']:>5}{r['M']:>5}{r['lr']:>9g}  "
                + ",".join(r["algorithms"])
            )
    return EXIT_OK


def _collect_train_values(args):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw.update(parse_config_text(fh.read(), args.config))
    for key in TRAIN_KEYS:
        val = getattr(args, "opt_" + key, None)
        if val is not None:
            raw[key] = val
    return typed_values(raw)


def run_train(values, outdir, command="train"):
    started = _now()
    cfg, problem = train_config_from_values(values)
    outdir = prepare_outdir(outdir)
    report = train(cfg, problem, log_every=max(1, cfg.max_iters // 20) if cfg.max_iters else 0)
    meta = {"problem": problem.to_config(), "algorithm": cfg.algorithm, "ridge": cfg.ridge, "seed": cfg.seed}
    outputs = {}
    outputs["value.ckpt"] = os.path.join(outdir, "value.ckpt")
    save_checkpoint(outputs["value.ckpt"], report.value_config, report.value_params, {**meta, "role": "value"})
    if report.control_config is not None:
        outputs["control.ckpt"] = os.path.join(outdir, "control.ckpt")
        save_checkpoint(
            outputs["control.ckpt"], report.control_config, report.control_params, {**meta, "role": "control"}
        )
    outputs["report.json"] = os.path.join(outdir, "report.json")
    atomic_write_text(outputs["report.json"], _dump(report.to_dict()))
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items() if k != "outdir"}
    write_manifest(outdir, command, settings, cfg.seed, outputs, started)
    if not report.ok:
        err = {"NumericError": NumericError, "ConditioningError": ConditioningError}.get(
            report.error_type, RolloutDivergence
        )
        raise err(f"training failed at {report.error}; partial results in {outdir}")
    return {"status": "ok", "outdir": outdir, "iterations": len(report.loss_history),
            "final_loss": report.loss_history[-1] if report.loss_history else None}


def cmd_train(args):
    values = _collect_train_values(args)
    outdir = values.get("outdir") or default_outdir("train")
    print(json.dumps(run_train(values, outdir)))
    return EXIT_OK


def _resolve_checkpoint(path):
    """Accept a run directory or a value checkpoint; returns (value_path, control_path or None)."""
    if os.path.isdir(path):
        value = os.path.join(path, "value.ckpt")
        control = os.path.join(path, "control.ckpt")
        return value, (control if os.path.exists(control) else None)
    return path, None


def load_run(path, problem_name=None, problem_lambda=None):
    value_path, control_path = _resolve_checkpoint(path)
    vcfg, vparams, meta = load_checkpoint(value_path)
    if "problem" not in meta:
        raise CheckpointError(f"{value_path} carries no problem description")
    problem = problem_from_config(meta["problem"])
    if problem_name is not None:
        requested = get_builtin(problem_name)
        if (requested.n, requested.m) != (problem.n, problem.m):
            raise CheckpointError(
                f"checkpoint is for n={problem.n}, m={problem.m}; {problem_name!r} has n={requested.n}, m={requested.m}"
            )
    if vcfg.state_dim != problem.n:
        raise CheckpointError("value checkpoint input size does not match its problem")
    algorithm = meta.get("algorithm", "onenet")
    cnet = None
    if algorithm == "twonet":
        if control_path is None:
            control_path = os.path.join(os.path.dirname(value_path), "control.ckpt")
        ccfg, cparams, _ = load_checkpoint(control_path)
        if ccfg.state_dim != problem.n or ccfg.output_dim != problem.m:
            raise CheckpointError("control checkpoint dimensions do not match the problem")
        cnet = Network(ccfg, cparams)
    return problem, algorithm, Network(vcfg, vparams), cnet, float(meta.get("ridge", 0.0))


def run_eval(values, outdir, command="eval"):
    started = _now()
    ckpts = values["checkpoint"]
    paths, seed = int(values.get("paths", 30)), int(values.get("seed", 0))
    if paths < 1:
        raise ConfigError("paths must be positive")
    outdir = prepare_outdir(outdir)
    batches, summaries, grid = [], [], None
    for path in ckpts:
        problem, algorithm, vnet, cnet, ridge = load_run(path, values.get("problem"))
        N = values.get("N") or problem.N
        g = TimeGrid(problem.t0, problem.T, int(N))
        if grid is not None and not g.same_as(grid):
            raise ConfigError("all evaluated runs must share one time grid")
        grid = g
        noise = sample_brownian(g, problem.d_hat, paths, seed, stream=(EVAL_STREAM,))
        batch = rollout(problem, make_policy(problem, algorithm, vnet, cnet, ridge), g, noise)
        batches.append(batch)
        costs = path_costs(problem, batch)
        xT = batch.states[:, -1]
        summary = {
            "checkpoint": os.path.abspath(path),
            "problem": problem.name,
            "terminal_state_mean": xT.mean(axis=0).tolist(),
            "terminal_state_abs_mean": np.abs(xT).mean(axis=0).tolist(),
        }
        if paths >= 2:
            summary["cost"] = {
                "mean": float(costs.mean()),
                "std": float(costs.std(ddof=1)),
                "paths": paths,
                "stderr": float(costs.std(ddof=1) / np.sqrt(paths)),
            }
        summaries.append(summary)
    outputs = {"trajectories.csv": os.path.join(outdir, "trajectories.csv")}
    atomic_write_text(outputs["trajectories.csv"], paths_to_csv(batches, range(len(batches))))
    outputs["cost.json"] = os.path.join(outdir, "cost.json")
    atomic_write_text(outputs["cost.json"], _dump({"runs": summaries, "paths": paths, "seed": seed}))
    if sum(b.paths for b in batches) >= 2:
        outputs["stats.csv"] = os.path.join(outdir, "stats.csv")
        atomic_write_text(outputs["stats.csv"], run_statistics(batches).to_csv())
    settings = {"checkpoint": [os.path.abspath(p) for p in ckpts], "paths": paths, "seed": seed}
    if values.get("problem"):
        settings["problem"] = values["problem"]
    if values.get("N"):
        settings["N"] = int(values["N"])
    write_manifest(outdir, command, settings, seed, outputs, started)
    return {"status": "ok", "outdir": outdir, "runs": summaries}


def cmd_eval(args):
    values = {"checkpoint": args.checkpoint, "paths": args.paths, "seed": args.seed,
              "problem": args.problem, "N": args.N}
    outdir = args.outdir or default_outdir("eval")
    print(json.dumps(run_eval(values, outdir)))
    return EXIT_OK


def parse_seeds(text):
    """``"1..5"`` or ``"1,2,7"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"malformed seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def parse_n_list(text):
    try:
        Ns = [int(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"malformed N list {text!r}") from None
    return validate_n_list(Ns)


def run_sweep(values, Ns, seeds, outdir, command="sweep"):
    started = _now()
    values = dict(values)
    values.setdefault("seed", seeds[0])
    cfg, problem = train_config_from_values(values)
    outdir = prepare_outdir(outdir)
    report = dt_sweep(cfg, Ns, seeds)
    outputs = {"sweep.json": os.path.join(outdir, "sweep.json")}
    atomic_write_text(outputs["sweep.json"], _dump(report.to_dict()))
    settings = {k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items() if k != "outdir"}
    write_manifest(outdir, command, settings, None, outputs, started, {"N_list": Ns, "seeds": seeds})
    return {"status": "ok", "outdir": outdir, "entries": len(report.entries)}


def cmd_sweep(args):
    Ns = parse_n_list(args.Ns)
    seeds = parse_seeds(args.seeds)
    values = _collect_train_values(args)
    outdir = values.get("outdir") or default_outdir("sweep")
    print(json.dumps(run_sweep(values, Ns, seeds, outdir)))
    return EXIT_OK


def cmd_rerun(args):
    """Repeat a recorded command with the manifest's settings into a new directory."""
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    command, settings = manifest.get("command"), dict(manifest.get("config", {}))
    outdir = args.outdir or default_outdir(command or "rerun")
    if command == "train":
        result = run_train(typed_values(settings), outdir)
    elif command == "eval":
        result = run_eval(settings, outdir)
    elif command == "sweep":
        result = run_sweep(typed_values(settings), manifest["N_list"], manifest["seeds"], outdir)
    else:
        raise ConfigError(f"manifest has unknown command {command!r}")
    print(json.dumps(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_options(p):
    p.add_argument("--config", help="key=value config file")
    flags = {
        "problem": "built-in problem name",
        "algo": "twonet or onenet",
        "arch": "fc or lstm",
        "hidden": "hidden sizes, e.g. 32,32",
        "N": "time steps",
        "M": "sample paths per iteration",
        "batch": "minibatch size (<= M)",
        "iters": "training iterations",
        "lr": "learning rate",
        "optimizer": "adam or sgd",
        "lambda": "control-noise coefficient override",
        "seed": "random seed",
        "outdir": "output directory (must not exist or be empty)",
        "resample_noise": "true/false: fresh noise every iteration",
        "ridge": "ridge added to the effective control cost",
        "control_update": "residual or hamiltonian (twonet control step)",
        "baseline": "auto, none, unit, terminal or lqr: fixed quadratic added to q",
        "gain": "fixed output factor of the value network",
    }
    for key, help_text in flags.items():
        names = ["--" + key] + (["--" + key.replace("_", "-")] if "_" in key else [])
        p.add_argument(*names, dest="opt_" + key, default=None, help=help_text)


def build_parser():
    parser = argparse.ArgumentParser(prog="deephjb", description="Physics-informed HJB solvers for stochastic control")
    parser.add_argument("--version", action="version", version=f"deephjb {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list", help="list built-in problems")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("train", help="train a solver")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out trained policies on fresh noise")
    p.add_argument("--checkpoint", action="append", required=True, help="run directory or value.ckpt (repeatable)")
    p.add_argument("--paths", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--problem", default=None, help="expected problem; dimensions are checked")
    p.add_argument("--N", type=int, default=None, help="time steps (default: the problem's)")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="final loss against the number of time steps")
    p.add_argument("--Ns", required=True, help="comma-separated step counts, e.g. 10,20,40")
    p.add_argument("--seeds", default="1..5", help="e.g. 1..5 or 1,2,3")
    _add_train_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--outdir", default=None)
    p.set_defaults(func=cmd_rerun)
    return parser


def _error(exc, code):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}))
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        return _error(exc, EXIT_VALIDATION)
    except (NumericError, ConditioningError, RolloutDivergence, ArithmeticError) as exc:
        return _error(exc, EXIT_NUMERIC)
    except (CheckpointError, OSError) as exc:
        return _error(exc, EXIT_IO)
    except DeepHJBError as exc:
        return _error(exc, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
