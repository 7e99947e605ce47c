"""Feedforward and LSTM networks for the value function and the control.

Parameters live in one flat float64 vector; :class:`NetworkParams` maps
``"<layer>.<role>"`` names onto contiguous slices of it.  Forward passes are
written on jets (:mod:`deephjb.diffengine`) so the same code gives plain
outputs (order 0) or outputs with first/second input derivatives.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffengine as de
from . import tensor as tn
from .errors import CheckpointError, ConfigError, ShapeError, UsageError
from .fileio import atomic_write_bytes

KINDS = ("fc", "lstm")


@dataclass(frozen=True)
class NetworkConfig:
    kind: str
    input_dim: int
    hidden_sizes: tuple
    output_dim: int
    activation: str = "tanh"
    init_seed: int = 0
    output_bound: float | None = None
    output_scale: float = 1.0  # multiplies the output layer's init range
    output_gain: float = 1.0  # fixed factor on the network output
    quadratic: dict | None = None  # {"Q": n x n, "center": n}: adds (x-c)^T Q (x-c) to the output

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown network kind {self.kind!r}; expected one of {KINDS}")
        if self.activation not in de.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.hidden_sizes:
            raise ConfigError("hidden_sizes must be non-empty")
        if min((self.input_dim, self.output_dim) + self.hidden_sizes) <= 0:
            raise ConfigError("all network dimensions must be positive")
        if self.quadratic is not None:
            n = self.input_dim - 1
            Q = np.asarray(self.quadratic.get("Q"), dtype=np.float64)
            c = np.asarray(self.quadratic.get("center"), dtype=np.float64)
            if self.output_dim != 1 or Q.shape != (n, n) or c.shape != (n,):
                raise ConfigError("quadratic term needs output_dim 1, Q of shape (n, n) and center of shape (n,)")
            quad = {"Q": Q.tolist(), "center": c.tolist()}
            object.__setattr__(self, "quadratic", quad)
        if not (self.output_gain > 0 and np.isfinite(self.output_gain)):
            raise ConfigError("output_gain must be positive and finite")
        if not self.output_scale >= 0:
            raise ConfigError("output_scale must be non-negative")
        if self.input_dim < 2:
            raise ConfigError("input is (t, x); input_dim must be at least 2")

    @property
    def state_dim(self):
        return self.input_dim - 1

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def value_config(n, kind="fc", hidden=None, seed=0, output_scale=1.0, output_gain=1.0, quadratic=None):
    hidden = hidden or ((32, 32) if kind == "fc" else (32,))
    return NetworkConfig(
        kind, 1 + n, tuple(hidden), 1, init_seed=seed, output_scale=output_scale, output_gain=output_gain,
        quadratic=quadratic,
    )


def control_config(n, m, kind="fc", hidden=None, seed=0, bound=None, output_scale=1.0):
    hidden = hidden or ((32, 32) if kind == "fc" else (32,))
    return NetworkConfig(kind, 1 + n, tuple(hidden), m, init_seed=seed, output_bound=bound, output_scale=output_scale)


def build_layout(config):
    """Ordered ``name -> (start, stop, shape)``; W is stored (out, in)."""
    shapes = []
    if config.kind == "fc":
        sizes = (config.input_dim,) + config.hidden_sizes
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes += [(f"layer{i}.W", (b, a)), (f"layer{i}.b", (b,))]
        last = sizes[-1]
    else:
        prev = config.input_dim
        for i, h in enumerate(config.hidden_sizes):
            shapes += [
                (f"lstm{i}.W_ih", (4 * h, prev)),
                (f"lstm{i}.W_hh", (4 * h, h)),
                (f"lstm{i}.b", (4 * h,)),
            ]
            prev = h
        last = prev
    shapes += [("out.W", (config.output_dim, last)), ("out.b", (config.output_dim,))]
    layout, pos = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (pos, pos + size, shape)
        pos += size
    return layout


def param_count(config):
    return max(stop for _, stop, _ in build_layout(config).values())


@dataclass
class NetworkParams:
    flat: object  # ndarray, or a Tensor leaf while differentiating
    layout: dict = field(repr=False)

    def __post_init__(self):
        size = tn.value(self.flat).shape
        total = max(stop for _, stop, _ in self.layout.values())
        if size != (total,):
            raise ShapeError(f"flat parameter vector has shape {size}, layout needs ({total},)")

    def get(self, name):
        start, stop, shape = self.layout[name]
        return tn.reshape(tn.getitem(self.flat, slice(start, stop)), shape)

    def with_flat(self, flat):
        return NetworkParams(flat, self.layout)

    def copy(self):
        return NetworkParams(np.array(tn.value(self.flat)), self.layout)

    def __len__(self):
        return tn.value(self.flat).shape[0]


def init_network(config):
    """Glorot-uniform weights, zero biases, reproducible from ``init_seed``."""
    layout = build_layout(config)
    rng = np.random.default_rng(config.init_seed)
    flat = np.zeros(max(stop for _, stop, _ in layout.values()))
    for name, (start, stop, shape) in layout.items():
        if name.endswith(".b"):
            continue
        fan_out, fan_in = shape
        if config.kind == "lstm" and name.split(".")[0].startswith("lstm"):
            fan_out //= 4  # per gate
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        if name == "out.W":
            limit *= config.output_scale
        flat[start:stop] = rng.uniform(-limit, limit, size=stop - start)
    return NetworkParams(flat, layout)


@dataclass
class LstmState:
    hidden: list
    cell: list

    @classmethod
    def zeros(cls, config, batch):
        return cls(
            [np.zeros((batch, h)) for h in config.hidden_sizes],
            [np.zeros((batch, h)) for h in config.hidden_sizes],
        )

    def detach(self):
        return LstmState([np.array(tn.value(h)) for h in self.hidden], [np.array(tn.value(c)) for c in self.cell])

    def select(self, idx):
        return LstmState([tn.getitem(h, idx) for h in self.hidden], [tn.getitem(c, idx) for c in self.cell])


def forward_jet(params, config, s, state=None, order=0):
    """Push the input batch ``s = [t, x]`` (B, 1+n) through the network.

    Returns ``(output_jet, next_state)``; ``next_state`` is ``None`` for FC.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != config.input_dim:
        raise ShapeError(f"input has shape {s.shape}, network expects (B, {config.input_dim})")
    act = de.ACTIVATIONS[config.activation]
    jet = de.input_jet(s, order)
    next_state = None
    if config.kind == "fc":
        for i in range(len(config.hidden_sizes)):
            jet = act(de.affine(jet, params.get(f"layer{i}.W"), params.get(f"layer{i}.b")))
    else:
        if state is None:
            state = LstmState.zeros(config, s.shape[0])
        hs, cs = [], []
        for i, h in enumerate(config.hidden_sizes):
            recurrent = tn.matmul(state.hidden[i], tn.swapaxes(params.get(f"lstm{i}.W_hh"), 0, 1))
            z = de.affine(jet, params.get(f"lstm{i}.W_ih"), params.get(f"lstm{i}.b"), extra=recurrent)
            gi = de.sigmoid(z.slice(0, h))
            gf = de.sigmoid(z.slice(h, 2 * h))
            gg = de.tanh(z.slice(2 * h, 3 * h))
            go = de.sigmoid(z.slice(3 * h, 4 * h))
            c = de.add(de.scale(gf, state.cell[i]), de.mul(gi, gg))
            jet = de.mul(go, de.tanh(c))
            hs.append(jet.val)
            cs.append(c.val)
        next_state = LstmState(hs, cs)
    out = de.affine(jet, params.get("out.W"), params.get("out.b"))
    if config.output_bound is not None:
        out = _times(de.tanh(out), config.output_bound)
    if config.output_gain != 1.0:
        out = _times(out, config.output_gain)
    if config.quadratic is not None:
        out = de.add(out, _quadratic_jet(config.quadratic, s, out.order))
    return out, next_state


def _quadratic_jet(quad, s, order):
    Q = np.asarray(quad["Q"])
    Qs = Q + Q.T
    dev = s[:, 1:] - np.asarray(quad["center"])
    B, n = dev.shape
    val = np.einsum("bi,ij,bj->b", dev, Q, dev)[:, None]
    if order == 0:
        return de.Jet(val, order=0)
    jac = np.concatenate([np.zeros((B, 1)), dev @ Qs], axis=1)[:, None, :]
    hess = np.broadcast_to(Qs, (B, 1, n, n)) if order == 2 else None
    return de.Jet(val, jac, hess, order)


def _times(jet, c):
    return de.Jet(
        jet.val * c,
        None if jet.jac is None else jet.jac * c,
        None if jet.hess is None else jet.hess * c,
        jet.order,
    )


def _check_state(config, state):
    if config.kind == "lstm" and state is None:
        raise UsageError("LSTM networks need a recurrent state (LstmState.zeros at sequence start)")
    if config.kind == "fc" and state is not None:
        raise UsageError("FC networks are stateless; state must be None")


def _stack_input(t, x, n):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != n:
        raise ShapeError(f"state has dimension {xb.shape[1]}, network expects {n}")
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    return np.column_stack([tb, xb]), single


def value_forward(params, config, t, x, state=None):
    """``q(t, x)`` and the advanced recurrent state (None for FC)."""
    _check_state(config, state)
    s, single = _stack_input(t, x, config.state_dim)
    out, nxt = forward_jet(params, config, s, state, order=0)
    q = out.val[:, 0]
    return (q[0] if single else q), nxt


def control_forward(params, config, t, x, state=None):
    """``u(t, x)`` of shape (m,) or (B, m) and the advanced state."""
    _check_state(config, state)
    s, single = _stack_input(t, x, config.state_dim)
    out, nxt = forward_jet(params, config, s, state, order=0)
    u = out.val
    return (u[0] if single else u), nxt


class Network:
    """A config bound to a parameter vector."""

    def __init__(self, config, params=None):
        self.config = config
        self.params = params if params is not None else init_network(config)

    def initial_state(self, batch):
        return LstmState.zeros(self.config, batch) if self.config.kind == "lstm" else None

    def jet(self, t, x, state=None, order=2):
        s = np.column_stack([np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),)), x])
        return forward_jet(self.params, self.config, s, state, order)

    def value(self, t, x, state=None):
        out, _ = self.jet(t, x, state, order=0)
        return np.asarray(tn.value(out.val))[:, 0]

    def __call__(self, t, x, state=None):
        out, nxt = self.jet(t, x, state, order=0)
        return out.val, nxt


# ---------------------------------------------------------------------------
# checkpoint files: MAGIC | u32 header length | header JSON | u64 count | f64 LE data

MAGIC = b"DHJBNET\x01"


def encode_checkpoint(config, params, meta=None):
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    flat = np.ascontiguousarray(tn.value(params.flat), dtype="<f8")
    return MAGIC + struct.pack("<I", len(header)) + header + struct.pack("<Q", flat.size) + flat.tobytes()


def decode_checkpoint(blob):
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic/version)")
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        flat = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    config = NetworkConfig.from_dict(header["config"])
    try:
        params = NetworkParams(flat, build_layout(config))
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    return config, params, header["meta"]


def save_checkpoint(path, config, params, meta=None):
    atomic_write_bytes(path, encode_checkpoint(config, params, meta))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
