"""Property and oracle suite behind ``artifact check``."""

from __future__ import annotations

import contextvars
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .adf_variance import adf_forward, relu_moments
from .attention_toy import AttentionBlock, attn_lrp, composite_lrp
from .net_core import (Activation, Dense, NetSpec, Stopping, decompose_forward, forward,
                       random_net)
from .path_oracle import (conditioned_law, finite_diff_gradient, oracle_bc,
                          oracle_occupation)
from .routing_game import (RGConfig, _relevance_from_gamma, attention_walk, build_rg, lrp_direct,
                           rg_attribution, rg_trajectory_mp)
from .stopping_game import build_sg, sg_gradient, sg_occupation, sg_player_values
from .trajectory_mp import (LayeredMP, conditioned_survival, hellinger_backward,
                            hellinger_forward, occupation, perm_invariant_hellinger,
                            apply_permutation)

__all__ = [
    "CheckResult",
    "SUITES",
    "run_checks",
    "random_mp",
    "guarded_input",
    "guarded_pair",
    "both_streams_present",
    "scale_neuron",
    "permute_hidden",
    "neuron_mp",
    "tag_preserving_perm",
]


@dataclass
class CheckResult:
    suite: str
    name: str
    max_dev: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_dev <= self.tol)


def random_mp(rng: np.random.Generator, widths, p_cem: float = 0.2, sparsity: float = 0.3
              ) -> LayeredMP:
    """Random layered process; ``widths[l]`` ordinary states at layer ``l``, start at the top."""
    labels = [[(l, i) for i in range(w)] for l, w in enumerate(widths)]
    kernels = []
    for l in range(1, len(widths)):
        T = rng.random((widths[l], 1 + widths[l - 1]))
        T[:, 1:] *= rng.random(T[:, 1:].shape) > sparsity
        T[:, 0] *= rng.random(widths[l]) < p_cem
        dead = T.sum(axis=1) == 0
        T[dead, 0] = 1.0
        kernels.append(T / T.sum(axis=1, keepdims=True))
    return LayeredMP(labels, kernels, 0)


def guarded_input(rng: np.random.Generator, net: NetSpec, margin: float = 1e-3,
                  tries: int = 200) -> np.ndarray | None:
    """Draw ``x`` until every dense pre-activation clears ``margin`` and the output is alive."""
    for _ in range(tries):
        x = rng.normal(size=net.input_dim)
        fwd = forward(net, x)
        zs = [z for z in fwd.z if z is not None]
        if all(np.all(np.abs(z) > margin) for z in zs) and fwd.output != 0:
            return x
    return None


def guarded_pair(rng: np.random.Generator, make: Callable[[], NetSpec], margin: float = 1e-3
                 ) -> tuple[NetSpec, np.ndarray]:
    """A fresh net and a boundary-guarded input; nets with a dead output are redrawn."""
    for _ in range(100):
        net = make()
        x = guarded_input(rng, net, margin)
        if x is not None:
            return net, x
    raise RuntimeError("no net/input pair clears the gate-boundary margin")


def scale_neuron(net: NetSpec, node: int, j: int, mu: float) -> NetSpec:
    """Scale neuron ``j`` of a dense node by ``mu`` and its outgoing weights by ``1/mu``."""
    layers = list(net.layers)
    d = layers[node - 1]
    W, b = d.W.copy(), d.b.copy()
    W[j] *= mu
    b[j] *= mu
    layers[node - 1] = Dense(W, b, d.activation)
    nxt = layers[node]
    W2 = nxt.W.copy()
    W2[:, j] /= mu
    layers[node] = Dense(W2, nxt.b, nxt.activation)
    return NetSpec(net.input_dim, net.output_neuron, tuple(layers))


def permute_hidden(net: NetSpec, node: int, perm: np.ndarray) -> NetSpec:
    """Reorder the neurons of a dense node: new neuron ``i`` is old neuron ``perm[i]``."""
    layers = list(net.layers)
    d = layers[node - 1]
    layers[node - 1] = Dense(d.W[perm], d.b[perm], d.activation)
    nxt = layers[node]
    layers[node] = Dense(nxt.W[:, perm], nxt.b, nxt.activation)
    return NetSpec(net.input_dim, net.output_neuron, tuple(layers))


_MAX_WIDTH: contextvars.ContextVar[int | None] = contextvars.ContextVar("max_width", default=None)


def _cap(widths, even: bool = False) -> list[int]:
    """Clamp hidden widths to the active ``max_width``; input and output widths are kept."""
    cap = _MAX_WIDTH.get()
    w = [int(v) for v in widths]
    if cap is None:
        return w
    for k in range(1, len(w) - 1):
        w[k] = min(w[k], cap)
        if even and w[k] % 2:
            w[k] = max(w[k] - 1, 2)
    return w


def _net(rng, widths, *args, **kwargs) -> NetSpec:
    return random_net(rng, _cap(widths, kwargs.get("attention", False)), *args, **kwargs)


def _max(values) -> float:
    vals = [float(v) for v in values]
    return max(vals) if vals else 0.0


# ---------------------------------------------------------------------------
# individual checks, each returning a maximum deviation


def _sg_gradient(rng, n, fault):
    devs = []
    for t in range(n):
        net, x = guarded_pair(rng, lambda: _net(rng, [4, 5, 5, 1], skip=t % 2 == 0,
                                                      maxpool=t % 3 == 0))
        fd = finite_diff_gradient(net, x, h=1e-5)
        devs.append(np.abs(sg_gradient(net, x) - fd).max())
    return _max(devs)


def _sg_values(rng, n, fault):
    devs = []
    for _ in range(n):
        net = _net(rng, [3, 4, 4, 1], skip=True)
        x = rng.normal(size=3)
        pv = sg_player_values(build_sg(net, x))
        d = decompose_forward(net, x, Stopping())
        for l in range(net.depth + 1):
            devs.append(np.abs(pv.U[l][0] - d.a_plus[l]).max())
            devs.append(np.abs(pv.U[l][1] - d.a_minus[l]).max())
    return _max(devs)


def _sg_oracle(rng, n, fault):
    devs = []
    for _ in range(n):
        net = _net(rng, [3, 3, 3, 1])
        k = build_sg(net, rng.normal(size=3))
        g = sg_occupation(k).gamma
        o = oracle_occupation(k.mp)
        devs.append(_max(np.abs(a - b).max() for a, b in zip(g, o)))
    return _max(devs)


def _sg_softplus(rng, n, fault):
    devs = []
    for _ in range(n):
        net = _net(rng, [4, 5, 4, 1], Activation("softplus", 0.5))
        x = rng.normal(size=4)
        devs.append(np.abs(sg_gradient(net, x) - finite_diff_gradient(net, x, h=1e-5)).max())
    return _max(devs)


def _rg_recovery(rng, n, fault):
    devs = []
    for t in range(n):
        net = _net(rng, [4, 6, 5, 2], skip=True, maxpool=True, attention=t % 2 == 0)
        x = rng.normal(size=4)
        for ab in ((1.0, 0.0), (2.0, 1.0)):
            for eps in (0.0, 0.5, 1.0):
                cfg = RGConfig(ab[0], ab[1], eps)
                ref = lrp_direct(net, x, ab[0], ab[1], eps)
                if fault:
                    k = build_rg(net, x, cfg)
                    disc = [d * 1.01 for d in k.mp.discounts]
                    mp = LayeredMP(k.mp.labels, k.mp.kernels, k.mp.start, disc)
                    k.mp = mp
                    rel = _relevance_from_gamma(k, occupation(mp), k.fwd.output)
                else:
                    rel = rg_attribution(net, x, cfg)[0]
                devs.append(_max(np.abs(a - b).max() for a, b in zip(rel.layers, ref.layers)))
    return _max(devs)


def both_streams_present(net: NetSpec, x: np.ndarray) -> bool:
    """Every open dense neuron has positive and negative contributions.

    With ``epsilon = 0`` an empty sign stream sends its branch to the
    cemetery, so alpha-beta conservation needs both streams wherever
    relevance can arrive.
    """
    fwd = forward(net, x)
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense):
            prod = fwd.a[l - 1][None, :] * layer.W
            open_ = fwd.z[l] > 0
            pos = np.maximum(prod, 0.0).sum(axis=1) > 0
            neg = np.maximum(-prod, 0.0).sum(axis=1) > 0
            if np.any(open_ & ~(pos & neg)):
                return False
    return True


def _rg_conservation(rng, n, fault):
    devs = []
    for t in range(n):
        ab = (1.0, 0.0) if t % 2 else (2.0, 1.0)
        while True:
            net = _net(rng, [4, 5, 5, 1], bias_std=0.0, maxpool=t % 3 == 0)
            x = rng.normal(size=4)
            if ab[1] == 0 or both_streams_present(net, x):
                break
        rel, _ = rg_attribution(net, x, RGConfig(*ab, 0.0))
        devs.append(abs(rel.input.sum() - forward(net, x).output))
    return _max(devs)


def _rg_scaling(rng, n, fault):
    devs = []
    for _ in range(n):
        net = _net(rng, [3, 4, 4, 1])
        x = rng.normal(size=3)
        other = scale_neuron(net, 1, int(rng.integers(net.widths[1])), 1.7)
        devs.append(hellinger_backward(rg_trajectory_mp(net, x, RGConfig(epsilon=0.0)),
                                       rg_trajectory_mp(other, x, RGConfig(epsilon=0.0))).H)
    return _max(devs)


def neuron_mp(rng: np.random.Generator, widths, p_cem: float = 0.2) -> LayeredMP:
    """Random process whose states carry ``(group, neuron, tag)`` labels with two tags each."""
    tags = ("+", "-")
    labels = [[("x", i, t) for i in range(widths[0]) for t in tags]]
    labels += [[("n", l, i, t) for i in range(w) for t in tags] for l, w in enumerate(widths)][1:]
    base = random_mp(rng, [len(lab) for lab in labels], p_cem=p_cem, sparsity=0.0)
    return LayeredMP(labels, base.kernels, 0)


def tag_preserving_perm(rng: np.random.Generator, labels) -> np.ndarray:
    """Random neuron permutation of one layer applied to both tags."""
    n = len(labels) // 2
    sigma = rng.permutation(n)
    return np.array([2 * sigma[k // 2] + k % 2 for k in range(len(labels))])


def _h_perm(rng, n, fault):
    devs = []
    for _ in range(n):
        widths = _cap([3, 4, 3, 1])
        net = random_net(rng, widths)
        x = rng.normal(size=3)
        perms = {1: rng.permutation(widths[1]), 2: rng.permutation(widths[2])}
        other = permute_hidden(permute_hidden(net, 1, perms[1]), 2, perms[2])
        devs.append(perm_invariant_hellinger(rg_trajectory_mp(net, x),
                                             rg_trajectory_mp(other, x)).h_perm)
        mpA = neuron_mp(rng, _cap([2, 3, 4, 1]))
        Q = {l: tag_preserving_perm(rng, mpA.labels[l]) for l in (1, 2)}
        res = perm_invariant_hellinger(mpA, apply_permutation(mpA, Q))
        devs.append(res.h_perm)
        for l in (1, 2):
            # B state i is A state Q[i], so the minimiser must be the inverse of Q
            if not np.array_equal(res.perms.get(l, np.arange(len(Q[l]))), np.argsort(Q[l])):
                devs.append(1.0)
    return _max(devs)


def _mp_pairs(rng, n):
    for _ in range(n):
        w = [int(v) for v in rng.integers(1, 6, size=5)]
        w[-1] = 1
        w = _cap(w)
        yield random_mp(rng, w), random_mp(rng, w)


def _h_oracle(rng, n, fault):
    devs = []
    for a, b in _mp_pairs(rng, n):
        hb = hellinger_backward(a, b)
        devs += [abs(hb.bc[0] - hellinger_forward(a, b).bc0), abs(hb.bc[0] - oracle_bc(a, b))]
    return _max(devs)


def _h_cross(rng, n, fault):
    devs = []
    for a, b in _mp_pairs(rng, n):
        cross = hellinger_forward(a, b).cross_check(hellinger_backward(a, b).beta)
        devs.append(float(np.ptp(cross)))
    return _max(devs)


def _h_nonneg(rng, n, fault):
    devs = []
    for a, b in _mp_pairs(rng, n):
        r = hellinger_backward(a, b)
        devs += [max(-float(r.h2.min()), 0.0), max(float((r.h2_marg - r.h2).max()), 0.0)]
    return _max(devs)


def _h_sum(rng, n, fault):
    devs = []
    for a, b in _mp_pairs(rng, n):
        r = hellinger_backward(a, b)
        devs.append(abs(math.fsum(r.h2) - r.H2))
    return _max(devs)


def _h_conditioned(rng, n, fault):
    devs = []
    for _ in range(n):
        w = [3, 3, 3, 1]
        a, b = random_mp(rng, w, p_cem=0.5), random_mp(rng, w, p_cem=0.5)
        try:
            c = conditioned_survival(a, b)
        except ValueError:
            continue
        la, lb = conditioned_law(a), conditioned_law(b)
        bc = math.fsum(math.sqrt(p * lb[k]) for k, p in la.items() if k in lb)
        devs += [abs(c.h_surv - c.h_surv_posthoc), abs(c.h_surv ** 2 - (1 - bc))]
    return _max(devs)


def _adf_moments(rng, n, fault):
    devs = []
    draws = 1_000_000
    for _ in range(n):
        mu, v = rng.normal(), rng.uniform(0.1, 4.0)
        m1, v1 = relu_moments(np.array([mu]), np.array([v]))
        s = np.maximum(mu + math.sqrt(v) * rng.standard_normal(draws), 0.0)
        se_m = s.std() / math.sqrt(draws)
        se_v = ((s - s.mean()) ** 2).std() / math.sqrt(draws)
        devs += [abs(m1[0] - s.mean()) / se_m, abs(v1[0] - s.var()) / se_v]
    # family-wise version of the 3 s.e. rule, so the suite's false-alarm rate stays at 0.27%
    z_crit = float(ndtri(1.0 - 0.0027 / (2 * len(devs))))
    return _max(devs) / z_crit


def _adf_degenerate(rng, n, fault):
    devs = []
    for _ in range(n):
        net = _net(rng, [3, 4, 4, 1], skip=True, maxpool=True)
        x = rng.normal(size=3)
        mf = adf_forward(net, x, 0.0)
        fwd = forward(net, x)
        devs += [np.abs(m - a).max() for m, a in zip(mf.mu, fwd.a)]
        devs += [np.abs(v).max() for v in mf.var]
    return _max(devs)


def _attn_recovery(rng, n, fault):
    devs = []
    for _ in range(n):
        D, dh, S = 4, 2, 3
        Ws = [rng.normal(0, 0.5, size=(D, dh)) for _ in range(3)]
        X = np.abs(rng.normal(size=(S, D)))
        blk = AttentionBlock(*Ws, X)
        R_O = rng.normal(size=(S, dh))
        ref = attn_lrp(blk, R_O, 2.0, 1.0)
        devs.append(np.abs(ref.R_X - composite_lrp(blk, R_O, 2.0, 1.0)).max())
        devs.append(np.abs(ref.R_X - attention_walk(blk, R_O, 2.0, 1.0)).max())
    return _max(devs)


SUITES: dict[str, list[tuple[str, Callable, float, int]]] = {
    "sg": [
        ("gradient vs finite differences", _sg_gradient, 1e-5, 50),
        ("player values vs stopping decomposition", _sg_values, 1e-10, 20),
        ("occupation vs enumeration", _sg_oracle, 1e-12, 10),
        ("softplus gradient vs finite differences", _sg_softplus, 1e-6, 20),
    ],
    "rg": [
        ("occupation relevance vs direct recursion", _rg_recovery, 1e-9, 50),
        ("conservation at eps=0", _rg_conservation, 1e-9, 50),
        ("neuron scaling leaves H at 0", _rg_scaling, 1e-12, 20),
    ],
    "hellinger": [
        ("backward vs forward vs enumeration", _h_oracle, 1e-13, 100),
        ("layer cross-check constant", _h_cross, 1e-12, 100),
        ("h2 non-negative and dominates marginal map", _h_nonneg, 1e-14, 100),
        ("h2 sums to H^2", _h_sum, 1e-12, 100),
        ("permuted copy has H_perm = 0, inverse recovered", _h_perm, 1e-12, 10),
        ("conditioned survival routes", _h_conditioned, 1e-12, 50),
    ],
    "adf": [
        ("ReLU moments vs Monte Carlo (family-wise 3 s.e.)", _adf_moments, 1.0, 10),
        ("zero variance reproduces forward", _adf_degenerate, 1e-12, 20),
    ],
    "attn": [
        ("value routing vs composite rule and game walk", _attn_recovery, 1e-10, 20),
    ],
}


def run_checks(suite: str = "all", seed: int = 0, inject_fault: bool = False,
               scale: float = 1.0, max_width: int | None = None) -> list[CheckResult]:
    """Run one suite (or ``"all"``); ``max_width`` caps the hidden widths of sampled nets and processes."""
    if suite != "all" and suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    if max_width is not None and max_width < 2:
        raise ValueError("max_width must be at least 2")
    token = _MAX_WIDTH.set(max_width)
    try:
        return _run(suite, seed, inject_fault, scale)
    finally:
        _MAX_WIDTH.reset(token)


def _run(suite: str, seed: int, inject_fault: bool, scale: float) -> list[CheckResult]:
    names = list(SUITES) if suite == "all" else [suite]
    out = []
    for s in names:
        for k, (name, fn, tol, n) in enumerate(SUITES[s]):
            rng = np.random.default_rng([seed, len(s), k])
            t0 = time.perf_counter()
            dev = fn(rng, max(1, int(round(n * scale))), inject_fault)
            out.append(CheckResult(s, name, float(dev), tol, time.perf_counter() - t0))
    return out
