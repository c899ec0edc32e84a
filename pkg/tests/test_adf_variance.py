import math

import numpy as np
import pytest

from artifact.adf_variance import adf_forward, relu_moments, risk_value
from artifact.net_core import Activation, forward, random_net


def test_standard_normal_moments():
    m, v = relu_moments(np.array([0.0]), np.array([1.0]))
    assert m[0] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert v[0] == pytest.approx(0.5 - 1 / (2 * math.pi), abs=1e-15)


def test_zero_variance_is_plain_relu():
    m, v = relu_moments(np.array([-1.0, 0.0, 2.5]), np.zeros(3))
    assert m.tolist() == [0.0, 0.0, 2.5] and v.tolist() == [0.0, 0.0, 0.0]


def test_moments_against_quadrature():
    from scipy.integrate import quad
    from scipy.stats import norm
    for mu, var in ((-1.3, 0.4), (0.7, 2.0), (3.0, 0.25)):
        sd = math.sqrt(var)
        e1 = quad(lambda t: t * norm.pdf(t, mu, sd), 0, np.inf)[0]
        e2 = quad(lambda t: t * t * norm.pdf(t, mu, sd), 0, np.inf)[0]
        m, v = relu_moments(np.array([mu]), np.array([var]))
        assert m[0] == pytest.approx(e1, abs=1e-10)
        assert v[0] == pytest.approx(e2 - e1 * e1, abs=1e-10)


def test_moments_against_monte_carlo(rng):
    draws = 200_000
    for _ in range(5):
        mu, var = rng.normal(), rng.uniform(0.1, 4.0)
        s = np.maximum(mu + math.sqrt(var) * rng.standard_normal(draws), 0.0)
        m, v = relu_moments(np.array([mu]), np.array([var]))
        assert abs(m[0] - s.mean()) < 4 * s.std() / math.sqrt(draws)


def test_degenerate_adf_reproduces_forward():
    rng = np.random.default_rng(2)
    net = random_net(rng, [3, 4, 4, 1], skip=True, maxpool=True)
    x = rng.normal(size=3)
    mf = adf_forward(net, x, 0.0)
    for m, v, a in zip(mf.mu, mf.var, forward(net, x).a):
        np.testing.assert_allclose(m, a, atol=1e-12)
        assert not v.any()
    assert not mf.approximate


def test_attention_adf_uses_clean_rows():
    rng = np.random.default_rng(3)
    net = random_net(rng, [4, 4, 1], attention=True)
    x = rng.normal(size=4)
    mf = adf_forward(net, x, 0.5)
    assert mf.key_sigma and all(np.all(s > 0) for s in mf.key_sigma.values())
    assert all(np.all(v >= 0) for v in mf.var)


def test_variance_grows_with_input_noise():
    rng = np.random.default_rng(4)
    net = random_net(rng, [3, 5, 1])
    x = rng.normal(size=3)
    lo, hi = adf_forward(net, x, 0.1), adf_forward(net, x, 1.0)
    assert np.all(hi.var[1] >= lo.var[1])


def test_nonrelu_noise_is_flagged():
    net = random_net(np.random.default_rng(5), [3, 4, 1], Activation("softplus", 1.0))
    assert adf_forward(net, np.ones(3), 0.2).approximate
    assert not adf_forward(net, np.ones(3), 0.0).approximate


def test_risk_value_examples():
    assert risk_value(2.0, 1.0, -1.0) == 1.0
    assert risk_value(0.5, 1.0, -1.0) == 0.0
    assert risk_value(3.0, 4.0, 0.0) == 3.0
    np.testing.assert_array_equal(risk_value(np.array([1.0, 4.0]), np.array([1.0, 1.0]), -2.0), [0.0, 2.0])
    with pytest.raises(ValueError):
        risk_value(1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        adf_forward(random_net(np.random.default_rng(0), [2, 2, 1]), [0.0, 0.0], -1.0)
