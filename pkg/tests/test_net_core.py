import json

import numpy as np
import pytest
from conftest import dense_net

from artifact.net_core import (Activation, Attention, Dense, MaxPool, Mixing, NetSpec, NetSpecError,
                               ResidualAdd, Softplus, Stopping, argmax_first, decompose_forward,
                               forward, mixing_convexity_probe, net_from_json, random_net, split_linear)


def scalar_loop_forward(net, x):
    """Straight-line re-implementation for dense ReLU chains."""
    a = list(map(float, x))
    for layer in net.layers:
        out = []
        for i in range(layer.W.shape[0]):
            z = float(layer.b[i])
            for j in range(layer.W.shape[1]):
                z += float(layer.W[i, j]) * a[j]
            out.append(z if z > 0 else 0.0)
        a = out
    return a[net.output_neuron]


def test_identity_net_positive_and_negative_input():
    net = dense_net([[1.0]])
    assert forward(net, [2.0]).output == 2.0
    assert forward(net, [-3.0]).output == 0.0


def test_seeded_net_matches_scalar_loop():
    net = random_net(np.random.default_rng(3), [3, 4, 1])
    x = np.random.default_rng(7).normal(size=3)
    assert forward(net, x).output == pytest.approx(scalar_loop_forward(net, x), abs=1e-14)


def test_forward_frozen_value():
    # value frozen from scalar_loop_forward
    net = random_net(np.random.default_rng(3), [3, 4, 1])
    x = np.random.default_rng(7).normal(size=3)
    assert forward(net, x).output == pytest.approx(0.008552175864305192, abs=1e-15)


def test_forward_rejects_bad_input():
    net = dense_net([[1.0, 2.0]])
    with pytest.raises(NetSpecError):
        forward(net, [1.0])
    with pytest.raises(NetSpecError):
        forward(net, [1.0, np.nan])


def test_structure_errors_name_the_layer():
    with pytest.raises(NetSpecError) as err:
        NetSpec(2, 0, (Dense(np.ones((3, 2)), np.zeros(3)), Dense(np.ones((1, 2)), np.zeros(1))))
    assert err.value.path == "/layers/1/W"
    with pytest.raises(NetSpecError):
        NetSpec(2, 0, (Dense(np.ones((2, 2)), np.zeros(2)), ResidualAdd(0, 5)))
    with pytest.raises(NetSpecError):
        NetSpec(3, 0, (MaxPool(((0, 1),)),))


def test_argmax_ties_go_to_first_index():
    assert argmax_first(np.array([1.0, 3.0, 3.0])) == 1
    net = NetSpec(2, 0, (MaxPool(((0, 1),)),))
    assert forward(net, [2.0, 2.0]).winners[1].tolist() == [0]


def test_closed_gate_decomposition():
    d = decompose_forward(dense_net([[2.0]]), [-3.0], Stopping())
    assert (d.z_plus[1][0], d.z_minus[1][0]) == (0.0, 6.0)
    assert (d.a_plus[1][0], d.a_minus[1][0]) == (0.0, 0.0)


def test_negative_weight_pairs_with_negative_input():
    d = decompose_forward(dense_net([[1.0, -1.0]]), [1.0, -1.0], Stopping())
    assert (d.z_plus[1][0], d.z_minus[1][0]) == (2.0, 0.0)
    assert d.a_plus[1][0] - d.a_minus[1][0] == 2.0


@pytest.mark.parametrize("kind", [Stopping(), Mixing(0.0), Mixing(0.5), Mixing(1.0)])
def test_relu_decompositions_recover_activations(kind):
    net = random_net(np.random.default_rng(11), [4, 5, 3, 1])
    for x in np.random.default_rng(12).normal(size=(10, 4)):
        d = decompose_forward(net, x, kind)
        fwd = forward(net, x)
        for l in range(net.depth + 1):
            np.testing.assert_allclose(d.difference(l), fwd.a[l], rtol=0, atol=1e-10)
            assert np.all(d.a_plus[l] >= 0) and np.all(d.a_minus[l] >= 0)


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_softplus_decomposition_recovers_softplus_net(theta):
    net = random_net(np.random.default_rng(13), [4, 5, 3, 1], Activation("softplus", theta))
    x = np.random.default_rng(14).normal(size=4)
    d = decompose_forward(net, x, Softplus(theta))
    fwd = forward(net, x)
    for l in range(net.depth + 1):
        np.testing.assert_allclose(d.difference(l), fwd.a[l], rtol=0, atol=1e-10)


def test_decomposition_kind_mismatch_rejected():
    net = random_net(np.random.default_rng(1), [2, 2, 1], Activation("softplus", 1.0))
    with pytest.raises(NetSpecError):
        decompose_forward(net, [0.1, 0.2], Stopping())


def test_mixing_eta_is_clamped():
    assert Mixing(2.0).eta == 1.0 and Mixing(-1.0).eta == 0.0
    with pytest.raises(ValueError):
        Softplus(0.0)


def test_stopping_monotone_on_fixed_region():
    net = random_net(np.random.default_rng(21), [3, 4, 4, 1], bias_std=0.0)
    x = np.random.default_rng(22).normal(size=3)
    base = decompose_forward(net, x, Stopping())
    gates = [None] + [(base.z_plus[l] - base.z_minus[l]) > 0 for l in range(1, net.depth + 1)]
    xp, xm = np.maximum(x, 0), np.maximum(-x, 0)

    def run(ap, am):
        out = [(ap, am)]
        for l, layer in enumerate(net.layers, start=1):
            zp, zm = split_linear(layer.W, layer.b, ap, am)
            ap, am = gates[l] * zp, gates[l] * zm
            out.append((ap, am))
        return out

    ref = run(xp, xm)
    for k in range(3):
        bumped = xp.copy()
        bumped[k] += 0.01
        for (p0, m0), (p1, m1) in zip(ref, run(bumped, xm)):
            assert np.all(p1 >= p0) and np.all(m1 >= m0)


def test_softplus_limit_approaches_stopping():
    rng = np.random.default_rng(31)
    net_r = random_net(rng, [3, 4, 1], bias_std=0.0)
    net_s = NetSpec(3, 0, tuple(Dense(l.W, l.b, Activation("softplus", 1e-3)) for l in net_r.layers))
    x = np.random.default_rng(32).normal(size=3)
    ds, dr = decompose_forward(net_s, x, Softplus(1e-3)), decompose_forward(net_r, x, Stopping())
    for l in range(1, 3):
        z = dr.z_plus[l] - dr.z_minus[l]
        ok = np.abs(z) > 0.1
        np.testing.assert_allclose(ds.a_plus[l][ok], dr.a_plus[l][ok], atol=1e-2)
        np.testing.assert_allclose(ds.a_minus[l][ok], dr.a_minus[l][ok], atol=1e-2)


def test_mixing_convexity_probe():
    net = random_net(np.random.default_rng(41), [3, 4, 4, 1])
    rng = np.random.default_rng(42)
    x0 = rng.normal(size=3)
    assert mixing_convexity_probe(net, x0, rng.normal(size=3), 0.0)
    assert mixing_convexity_probe(net, x0, x0, 0.3)
    for _ in range(100):
        assert mixing_convexity_probe(net, rng.normal(size=3), rng.normal(size=3), rng.uniform())


def test_json_round_trip_with_all_node_kinds():
    net = random_net(np.random.default_rng(5), [4, 4, 3, 1], skip=True, maxpool=True, attention=True)
    doc = json.loads(json.dumps(net.to_json()))
    assert net_from_json(doc) == net
    assert NetSpec.from_json(doc).topology() == net.topology()
    assert any(isinstance(l, Attention) for l in net.layers)


def test_schema_error_pointers():
    doc = dense_net([[1.0]]).to_json()
    del doc["layers"][0]["W"]
    with pytest.raises(NetSpecError) as err:
        net_from_json(doc)
    assert err.value.path == "/layers/0/W"
    doc = dense_net([[1.0]]).to_json()
    doc["layers"][0]["activation"] = {"softplus": -1}
    with pytest.raises(NetSpecError) as err:
        net_from_json(doc)
    assert err.value.path.startswith("/layers/0/activation")


def test_schema_accepts_softplus_and_gelu():
    for act in ({"softplus": 0.5}, "gelu"):
        doc = {"input_dim": 1, "output_neuron": 0,
               "layers": [{"kind": "dense", "W": [[1]], "b": [0], "activation": act}]}
        assert net_from_json(doc).layers[0].activation.to_json() == act
