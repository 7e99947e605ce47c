import numpy as np
import pytest

from deephjb import diffengine as de
from deephjb import tensor as tn
from deephjb.errors import CheckpointError, ConfigError, UsageError
from deephjb.networks import (
    LstmState,
    Network,
    NetworkConfig,
    NetworkParams,
    build_layout,
    control_forward,
    decode_checkpoint,
    encode_checkpoint,
    init_network,
    load_checkpoint,
    param_count,
    save_checkpoint,
    value_forward,
)

from conftest import random_net


def test_param_count_by_layout():
    cfg = NetworkConfig("fc", 3, (16, 16), 1)
    assert param_count(cfg) == 3 * 16 + 16 + 16 * 16 + 16 + 16 * 1 + 1 == 353


def test_layout_covers_vector_once():
    for cfg in (NetworkConfig("fc", 4, (5, 7), 2), NetworkConfig("lstm", 3, (6, 4), 1)):
        spans = sorted((a, b) for a, b, _ in build_layout(cfg).values())
        assert spans[0][0] == 0
        assert all(b == a2 for (_, b), (a2, _) in zip(spans[:-1], spans[1:]))
        assert spans[-1][1] == param_count(cfg)


def test_init_deterministic_and_seed_dependent():
    a = init_network(NetworkConfig("fc", 3, (8,), 1, init_seed=1))
    b = init_network(NetworkConfig("fc", 3, (8,), 1, init_seed=1))
    c = init_network(NetworkConfig("fc", 3, (8,), 1, init_seed=2))
    assert np.array_equal(a.flat, b.flat)
    assert np.any(a.flat != c.flat)
    assert np.all(a.flat[slice(*a.layout["layer0.b"][:2])] == 0)


@pytest.mark.parametrize("bad", [dict(hidden_sizes=()), dict(kind="cnn"), dict(output_dim=0), dict(input_dim=1)])
def test_config_validation(bad):
    kw = dict(kind="fc", input_dim=3, hidden_sizes=(4,), output_dim=1)
    kw.update(bad)
    with pytest.raises(ConfigError):
        NetworkConfig(**kw)


def test_zero_and_bias_only_outputs():
    cfg = NetworkConfig("fc", 3, (4, 4), 2)
    p = init_network(cfg)
    p.flat[:] = 0.0
    u, nxt = control_forward(p, cfg, 0.5, np.array([1.0, 2.0]))
    assert np.all(u == 0) and nxt is None
    start, stop, _ = p.layout["out.b"]
    p.flat[start:stop] = [1.5, -2.0]
    u, _ = control_forward(p, cfg, 0.1, np.random.default_rng(0).standard_normal((5, 2)))
    np.testing.assert_array_equal(u, np.tile([1.5, -2.0], (5, 1)))
    vcfg = NetworkConfig("fc", 3, (4,), 1)
    vp = init_network(vcfg)
    vp.flat[:] = 0.0
    vp.flat[vp.layout["out.b"][0]] = 3.0
    q, _ = value_forward(vp, vcfg, 0.2, np.array([0.0, 1.0]))
    assert q == 3.0


def test_state_usage_errors():
    fc = random_net("fc", n=2)
    lstm = random_net("lstm", n=2, hidden=(4,))
    with pytest.raises(UsageError):
        value_forward(fc.params, fc.config, 0.0, np.zeros(2), LstmState.zeros(lstm.config, 1))
    with pytest.raises(UsageError):
        value_forward(lstm.params, lstm.config, 0.0, np.zeros(2))


def _fc_from_lstm(lcfg, lp):
    """FC map equal to one LSTM step from a zero state with zero recurrent weights."""
    h = lcfg.hidden_sizes[0]
    W = np.asarray(lp.get("lstm0.W_ih"))
    b = np.asarray(lp.get("lstm0.b"))
    Wo, bo = np.asarray(lp.get("out.W")), np.asarray(lp.get("out.b"))

    def f(s):
        z = s @ W.T + b
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        i, g, o = sig(z[:, :h]), np.tanh(z[:, 2 * h : 3 * h]), sig(z[:, 3 * h :])
        return (o * np.tanh(i * g)) @ Wo.T + bo
    return f


def test_lstm_with_zero_recurrence_reduces_to_step_map():
    net = random_net("lstm", n=2, hidden=(5,), seed=2)
    s0, s1, _ = net.params.layout["lstm0.W_hh"]
    net.params.flat[s0:s1] = 0.0
    f = _fc_from_lstm(net.config, net.params)
    x = np.random.default_rng(1).standard_normal((4, 2))
    t = np.linspace(0, 1, 4)
    q, _ = value_forward(net.params, net.config, t, x, net.initial_state(4))
    np.testing.assert_allclose(q, f(np.column_stack([t, x]))[:, 0], rtol=0, atol=1e-12)


def test_lstm_causality():
    net = random_net("lstm", n=1, hidden=(4,), seed=5)
    xs = np.array([[0.1], [0.5], [-0.3], [0.2]])

    def outputs(seq):
        state, out = net.initial_state(1), []
        for k, x in enumerate(seq):
            q, state = value_forward(net.params, net.config, 0.1 * k, x, state)
            out.append(q)
        return np.array(out)

    base = outputs(xs)
    pert = xs.copy()
    pert[3] += 1.0
    assert np.array_equal(outputs(pert)[:3], base[:3])
    assert outputs(pert)[3] != base[3]


def test_control_gradient_matches_fd():
    net = random_net("fc", n=2, out=2, seed=7)
    s = np.array([[0.3, 0.1, -0.4]])

    def loss(p):
        out, _ = Network(net.config, p).jet(s[:, 0], s[:, 1:], order=0)
        return tn.sum_(out.val * out.val)

    g = de.param_gradient(loss, net.params)
    h = 1e-6
    for i in range(0, len(net.params), 7):
        up, dn = net.params.copy(), net.params.copy()
        up.flat[i] += h
        dn.flat[i] -= h
        fd = (float(tn.value(loss(up))) - float(tn.value(loss(dn)))) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_quadratic_term_and_gain():
    cfg = NetworkConfig("fc", 3, (4,), 1, output_scale=0.0, output_gain=5.0,
                        quadratic={"Q": np.diag([2.0, 3.0]), "center": [1.0, 0.0]})
    net = Network(cfg)
    d = de.eval_with_input_derivatives(net, 0.4, np.array([2.0, 1.0]))
    assert d.value == pytest.approx(2.0 + 3.0)
    np.testing.assert_allclose(d.grad_x, [4.0, 6.0])
    np.testing.assert_allclose(d.hess_x, np.diag([4.0, 6.0]))


def test_checkpoint_round_trip(tmp_path):
    net = random_net("lstm", n=3, hidden=(4,), seed=11)
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, net.config, net.params, {"note": "x"})
    cfg, params, meta = load_checkpoint(path)
    assert cfg == net.config and meta == {"note": "x"}
    assert params.flat.tobytes() == net.params.flat.tobytes()


def test_checkpoint_corruption(tmp_path):
    net = random_net("fc", n=2)
    blob = encode_checkpoint(net.config, net.params)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_params_shape_checked():
    cfg = NetworkConfig("fc", 3, (4,), 1)
    with pytest.raises(ValueError):
        NetworkParams(np.zeros(3), build_layout(cfg))
