import math

import numpy as np
import pytest
from conftest import dense_net
from scipy.special import ndtr

from artifact.checks import guarded_pair
from artifact.net_core import Activation, Dense, NetSpec, NetSpecError, Stopping, decompose_forward, random_net
from artifact.path_oracle import finite_diff_gradient, oracle_occupation
from artifact.stopping_game import (build_sg, build_sg_softplus, sg_gradient, sg_occupation,
                                    sg_player_values, sg_probit_gate, sg_trajectory_mp,
                                    soft_stop_value, probit_gate_value)
from artifact.trajectory_mp import hellinger_backward


def test_focal_row_and_turn_flip(toy):
    net, x = toy
    row = build_sg(net, x).row(2, 1, "+")
    assert row == {("n", 1, 0, "+"): 0.7, ("n", 1, 1, "+"): 0.2, ("n", 1, 2, "-"): 0.1}


def test_closed_gate_stops(toy):
    net, x = toy
    k = build_sg(net, x)
    assert k.cont[1][2] == 0.0
    T = k.mp.kernels[0]
    i = k.mp.index(1, ("n", 1, 2, "-"))
    assert T[i, 0] == 1.0


def test_rows_and_structural_discount_from_raw_weights():
    net = random_net(np.random.default_rng(2), [3, 3, 1])
    k = build_sg(net, np.random.default_rng(3).normal(size=3))
    for m in (1, 2):
        W = net.node(m).W
        np.testing.assert_allclose(k.gamma[m], np.abs(W).sum(axis=1), rtol=0, atol=1e-15)
        for i in range(W.shape[0]):
            for p in "+-":
                row = k.row(m, i, p)
                assert math.fsum(row.values()) == pytest.approx(1.0, abs=1e-15)
    for T in k.mp.kernels:
        np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)


def test_flipped_state_values_and_stop(toy):
    net, x = toy
    pv = sg_player_values(build_sg(net, x))
    assert pv.continuation(1, 2, "-", "-") == 40.0
    assert pv.continuation(1, 2, "-", "+") == 100.0
    assert pv.continuation_advantage(1, 2, "-", "-") == -60.0
    assert pv.value(1, 2, "-", "-") == 0.0


def test_terminal_values_are_input_parts():
    x = np.array([1.5, -2.0])
    pv = sg_player_values(build_sg(dense_net([[1.0, 1.0]]), x))
    np.testing.assert_array_equal(pv.U[0][0], [1.5, 0.0])
    np.testing.assert_array_equal(pv.U[0][1], [0.0, 2.0])


def test_player_values_match_stopping_decomposition():
    net = random_net(np.random.default_rng(5), [4, 5, 4, 1], skip=True, maxpool=True)
    x = np.random.default_rng(6).normal(size=4)
    pv = sg_player_values(build_sg(net, x))
    d = decompose_forward(net, x, Stopping())
    for l in range(net.depth + 1):
        np.testing.assert_allclose(pv.U[l][0], d.a_plus[l], atol=1e-10)
        np.testing.assert_allclose(pv.U[l][1], d.a_minus[l], atol=1e-10)
        # advantage of the owner equals the signed activation
        np.testing.assert_allclose(pv.U[l][0] - pv.U[l][1], d.difference(l), atol=1e-10)


def test_identity_net_occupation():
    occ = sg_occupation(build_sg(dense_net([[1.0]]), [2.0]))
    assert occ.at(("x", 0, "+")) == 1.0
    assert occ.at(("x", 0, "-")) == 0.0
    assert occ.at(("n", 1, 0, "+")) == 1.0


def test_gradient_trivial_cases():
    assert sg_gradient(dense_net([[1.0]]), [2.0]).tolist() == [1.0]
    assert sg_gradient(dense_net([[-1.0]]), [-2.0]).tolist() == [-1.0]


def test_positive_net_occupation_is_path_weight_sum():
    W1 = np.array([[0.5, 1.0], [2.0, 0.25]])
    W2 = np.array([[1.5, 0.5]])
    net = dense_net(W1, W2)
    occ = sg_occupation(build_sg(net, [1.0, 1.0]))
    np.testing.assert_allclose(occ.gradient, (W2 @ W1)[0], atol=1e-15)
    ora = oracle_occupation(occ.mp)
    for a, b in zip(occ.gamma, ora):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_stopped_state_passes_nothing_on(toy):
    net, x = toy
    occ = sg_occupation(build_sg(net, x))
    assert occ.at(("n", 1, 2, "-")) == 1.0
    # x_3 and x_4 feed only the closed neuron
    for k in (2, 3):
        assert occ.at(("x", k, "+")) == 0.0 and occ.at(("x", k, "-")) == 0.0


def test_occupation_non_negative_with_unit_start():
    net = random_net(np.random.default_rng(7), [3, 4, 4, 1], skip=True)
    occ = sg_occupation(build_sg(net, np.random.default_rng(8).normal(size=3)))
    assert occ.gamma[-1][occ.mp.start] == 1.0
    assert all(np.all(g >= 0) for g in occ.gamma)


def test_occupation_matches_enumeration():
    rng = np.random.default_rng(9)
    for _ in range(5):
        net = random_net(rng, [3, 3, 3, 1])
        k = build_sg(net, rng.normal(size=3))
        for a, b in zip(sg_occupation(k).gamma, oracle_occupation(k.mp)):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_gradient_matches_finite_differences_with_skip_and_maxpool():
    rng = np.random.default_rng(10)
    for t in range(10):
        net, x = guarded_pair(rng, lambda: random_net(rng, [4, 5, 5, 1], skip=True, maxpool=t % 2 == 0))
        np.testing.assert_allclose(sg_gradient(net, x), finite_diff_gradient(net, x), atol=1e-5)


def test_attention_rejected():
    net = random_net(np.random.default_rng(1), [4, 4, 1], attention=True)
    with pytest.raises(NetSpecError):
        build_sg(net, np.ones(4))


def test_softplus_gate():
    net = NetSpec(1, 0, (Dense(np.array([[1.0]]), np.array([0.0]), Activation("softplus", 1.0)),))
    k = build_sg_softplus(net, [0.0], 1.0)
    assert k.cont[1][0] == 0.5
    for z in (-3.0, 0.0, 0.7, 5.0):
        assert soft_stop_value(z, 1.0) == pytest.approx(math.log1p(math.exp(z)), abs=1e-12)
    with pytest.raises((ValueError, NetSpecError)):
        build_sg_softplus(net, [0.0], 0.0)


def test_softplus_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(5):
        net = random_net(rng, [4, 5, 4, 1], Activation("softplus", 0.5))
        x = rng.normal(size=4)
        np.testing.assert_allclose(sg_gradient(net, x), finite_diff_gradient(net, x), atol=1e-6)


def test_probit_gate_values():
    net = dense_net([[1.0]])
    assert sg_probit_gate(net, [0.0]).cont[1][0] == 0.5
    assert probit_gate_value(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    for z in (-1.0, 2.0):
        assert probit_gate_value(z) == pytest.approx(z * ndtr(z) + math.exp(-z * z / 2) / math.sqrt(2 * math.pi))


def test_layer_pair_scaling_leaves_sg_distance_zero():
    rng = np.random.default_rng(12)
    for _ in range(5):
        net = random_net(rng, [3, 4, 4, 1])
        x = rng.normal(size=3)
        lam = 2.5
        layers = list(net.layers)
        layers[0] = Dense(layers[0].W * lam, layers[0].b * lam)
        layers[1] = Dense(layers[1].W / lam, layers[1].b)
        other = NetSpec(3, 0, tuple(layers))
        H = hellinger_backward(sg_trajectory_mp(net, x), sg_trajectory_mp(other, x)).H
        assert H <= 1e-12

