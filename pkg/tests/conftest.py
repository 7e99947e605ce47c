import numpy as np
import pytest

from deephjb.networks import Network, NetworkConfig, init_network


def random_net(kind="fc", n=2, hidden=(8, 8), out=1, seed=0, scale=1.0):
    cfg = NetworkConfig(kind, 1 + n, hidden if kind == "fc" else hidden[:1], out, init_seed=seed)
    params = init_network(cfg)
    rng = np.random.default_rng(seed + 1000)
    # nonzero biases so every code path is exercised
    params.flat[:] += 0.1 * rng.standard_normal(params.flat.shape) * scale
    return Network(cfg, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
