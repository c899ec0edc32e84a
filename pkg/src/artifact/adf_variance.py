"""Assumed density filtering: independent-Gaussian mean/variance propagation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .net_core import Dense, MaxPool, NetSpec, ResidualAdd, argmax_first, forward

__all__ = ["MomentField", "adf_forward", "relu_moments", "risk_value"]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class MomentField:
    """Post-activation means ``mu[l]`` and variances ``var[l]`` per node.

    ``key_sigma[l]`` holds the per-key-token uncertainty of an attention node:
    the root mean square over feature dims of the value-vector std.
    """

    mu: list[np.ndarray]
    var: list[np.ndarray]
    key_sigma: dict[int, np.ndarray] = field(default_factory=dict)
    approximate: bool = False  # True when a non-ReLU activation used the ReLU closed form


def relu_moments(mu: np.ndarray, var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``max(X, 0)`` for ``X ~ N(mu, var)``; exact ReLU where ``var == 0``."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    sd = np.sqrt(var)
    pos = var > 0
    t = np.divide(mu, sd, out=np.zeros_like(mu), where=pos)
    Phi = ndtr(t)
    phi = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    m1 = mu * Phi + sd * phi
    m2 = (mu * mu + var) * Phi + mu * sd * phi
    v1 = np.maximum(m2 - m1 * m1, 0.0)
    return np.where(pos, m1, np.maximum(mu, 0.0)), np.where(pos, v1, 0.0)


def adf_forward(net: NetSpec, x: Sequence[float], sigma2: float,
                fwd=None) -> MomentField:
    """Propagate ``N(x, sigma2 I)`` through the net under the independence assumption.

    Attention mixes with the clean forward pass's softmax rows, held fixed.
    """
    if not sigma2 >= 0:
        raise ValueError("sigma2 must be non-negative")
    fwd = fwd if fwd is not None else forward(net, x)
    x = fwd.a[0]
    mu = [x.copy()]
    var = [np.full(x.shape, float(sigma2))]
    key_sigma: dict[int, np.ndarray] = {}
    approx = False
    for l, layer in enumerate(net.layers, start=1):
        m, v = mu[l - 1], var[l - 1]
        if isinstance(layer, Dense):
            zm = layer.W @ m + layer.b
            zv = (layer.W * layer.W) @ v
            om, ov = relu_moments(zm, zv)
            if layer.activation.kind != "relu":
                # Softplus and GELU borrow the ReLU closed form when noisy
                approx = approx or bool(np.any(zv > 0))
                om = np.where(zv == 0, layer.activation(zm), om)
        elif isinstance(layer, ResidualAdd):
            om = mu[layer.left] + mu[layer.right]
            ov = var[layer.left] + var[layer.right]
        elif isinstance(layer, MaxPool):
            idx = np.array([g[argmax_first(m[list(g)])] for g in layer.groups], dtype=int)
            om, ov = m[idx], v[idx]
        else:
            A = fwd.attention[l]["A"]
            S, D = layer.tokens, layer.model_dim
            mV = m.reshape(S, D) @ layer.WV
            vV = v.reshape(S, D) @ (layer.WV * layer.WV)
            key_sigma[l] = np.sqrt(vV.mean(axis=1))
            om = (A @ mV).reshape(-1)
            ov = ((A * A) @ vV).reshape(-1)
        mu.append(om)
        var.append(ov)
    return MomentField(mu, var, key_sigma, approx)


def risk_value(mu, v, lam: float):
    """Clamped lower-confidence bound ``max(mu + lam * sqrt(v), 0)``."""
    if lam > 0:
        raise ValueError("lambda must be non-positive")
    out = np.maximum(np.asarray(mu, dtype=float) + lam * np.sqrt(np.asarray(v, dtype=float)), 0.0)
    return float(out) if out.ndim == 0 else out
