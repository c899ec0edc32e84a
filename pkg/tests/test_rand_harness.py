import math

import numpy as np
import pytest

from artifact.net_core import random_net
from artifact.rand_harness import (cascade_randomize, cemetery_floor, dense_nodes, game_mp,
                                   input_noise_sweep, mean_field_pair, randomization_sweep,
                                   randomize_layer)
from artifact.trajectory_mp import hellinger_backward


def test_floor_values():
    f = cemetery_floor(0.2, 0.5, 0.5, math.inf)
    assert f.asymptote == pytest.approx(0.1 / 0.55, abs=1e-15)
    assert round(f.asymptote, 2) == 0.18 and round(f.h_asymptote, 2) == 0.90
    assert f.h_asymptote == pytest.approx(0.904534, abs=1e-6)


def test_floor_finite_depth_converges():
    prev = None
    for N in (1, 2, 5, 20, 200):
        f = cemetery_floor(0.2, 0.5, 0.5, N)
        assert f.bc_bound == pytest.approx(f.c0 + f.kappa ** N, abs=1e-15)
        if prev is not None:
            assert f.c0 >= prev
        prev = f.c0
    assert prev == pytest.approx(cemetery_floor(0.2, 0.5, 0.5, math.inf).asymptote, abs=1e-12)


def test_floor_argument_checks():
    for args in ((1.5, 0.5, 0.5, 1), (0.2, 0.5, 0.0, 1), (0.2, 0.5, 0.5, 0)):
        with pytest.raises(ValueError):
            cemetery_floor(*args)


@pytest.mark.parametrize("N", [1, 3])
def test_mean_field_pair_attains_the_bound(N):
    d, kappa, n = 0.2, 0.6, 5
    A, B = mean_field_pair(d, kappa, N, n)
    bc = hellinger_backward(A, B).bc[0]
    c0 = d * (1 - kappa ** N) / (1 - kappa)
    assert bc == pytest.approx(kappa ** N + c0, abs=1e-13)


def test_cascade_is_nested_and_keeps_lower_layers():
    net = random_net(np.random.default_rng(0), [3, 4, 4, 4, 1])
    nodes = dense_nodes(net)
    one, two = cascade_randomize(net, 1, 7), cascade_randomize(net, 2, 7)
    assert np.array_equal(one.layers[-1].W, two.layers[-1].W)
    assert np.array_equal(one.layers[0].W, net.layers[0].W)
    assert not np.array_equal(two.layers[-2].W, net.layers[-2].W)
    assert not two.layers[-1].b.any()
    assert cascade_randomize(net, 0, 7) is net
    with pytest.raises(ValueError):
        cascade_randomize(net, len(nodes) + 1, 0)


def test_single_layer_randomisation():
    net = random_net(np.random.default_rng(1), [3, 4, 4, 1], skip=True)
    nodes = dense_nodes(net)
    other = randomize_layer(net, nodes[0], 3)
    assert not np.array_equal(other.layers[0].W, net.layers[0].W)
    assert all(a is b for a, b in zip(other.layers[1:], net.layers[1:]))
    with pytest.raises(ValueError):
        randomize_layer(net, 99, 0)


def test_sweep_rows_and_csv():
    rng = np.random.default_rng(2)
    net = random_net(rng, [3, 4, 4, 1])
    inputs = rng.normal(size=(3, 3))
    res = randomization_sweep(net, inputs, seeds=(0, 1))
    assert len(res.rows) == 2 * 4
    assert np.all(res.column("SG", "H_mean")[:1] == 0.0)
    assert res.to_csv().splitlines()[0] == "step,layer,game,H_mean,H_std,Hsurv_mean,Hsurv_std"


def test_noise_sweep_zero_sigma_is_zero():
    rng = np.random.default_rng(3)
    net = random_net(rng, [3, 4, 1])
    res = input_noise_sweep(net, rng.normal(size=3), [0.0, 0.5], draws=4)
    assert res.H_mean[0] == 0.0
    assert res.to_sweep().rows[1]["layer"] == "sigma=0.5"


def test_game_mp_rejects_unknown_game():
    net = random_net(np.random.default_rng(4), [2, 2, 1])
    with pytest.raises(ValueError):
        game_mp("XX", net, [0.0, 0.0])
