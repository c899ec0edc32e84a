"""The Routing Game: Gibbs routing over predecessors, whose occupation measure is alpha-beta LRP.

An activation state ``("n", m, j, p)`` continues with probability ``c_j``
(``1[z_j > 0]`` or ``Phi(z_j)``), picks a sign branch ``sigma`` with
probability one half each, and then routes to predecessor ``i`` with the
Gibbs weight ``pi^sigma(i | j) = s_i^(1/tau) / (eps^(1/tau) + sum_i s_i^(1/tau))``
where ``s_i = [v_i W_ji]^sigma``.  The ``+`` branch keeps the player and
carries discount ``2 alpha``; the ``-`` branch flips it and carries ``2 beta``.

An attention node occupies two layers of the Markov process: the output
entry ``(q, d)`` routes to a Value-stage state ``("v", m, sigma, k d_h + d, p)``
which then routes to the input features ``(k, e)`` of token ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from ._mpbuild import MPBuilder
from .adf_variance import MomentField, adf_forward, risk_value
from .attention_toy import AttentionBlock, attn_lrp, qk_oracle, value_streams
from .net_core import (Attention, Dense, ForwardResult, MaxPool, NetSpec, ResidualAdd,
                       forward)
from .stopping_game import PLAYERS, OccupationResult, node_differences
from .trajectory_mp import LayeredMP, occupation

__all__ = [
    "RGConfig",
    "RGKernel",
    "RelevanceMap",
    "build_rg",
    "rg_attribution",
    "rg_trajectory_mp",
    "rg_values",
    "lrp_direct",
    "gibbs_row",
    "fanin_entropy",
    "attention_walk",
]

SIGMAS = ("+", "-")


def _flip(p: str) -> str:
    return "-" if p == "+" else "+"


@dataclass(frozen=True)
class RGConfig:
    alpha: float = 2.0
    beta: float = 1.0
    epsilon: float = 0.5
    tau: float = 1.0
    lam: float = 0.0
    sigma2: float = 0.0
    lambda_sm: float = 0.0
    lambda_ent: float = 0.0
    gate: str = "hard"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self._numbers()):
            raise ValueError("config values must be finite")
        checks = [
            (self.tau > 0, "tau must be positive"),
            (self.epsilon >= 0, "epsilon must be non-negative"),
            (self.alpha >= 0 and self.beta >= 0, "alpha and beta must be non-negative"),
            (self.lam <= 0, "lambda must be non-positive"),
            (self.sigma2 >= 0, "sigma2 must be non-negative"),
            (self.lambda_sm <= 0, "lambda_sm must be non-positive"),
            (self.lambda_ent >= 0, "lambda_ent must be non-negative"),
            (self.gate in ("hard", "probit"), "gate must be 'hard' or 'probit'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def _numbers(self):
        return (self.alpha, self.beta, self.epsilon, self.tau, self.lam, self.sigma2,
                self.lambda_sm, self.lambda_ent)

    def discount(self, sigma: str) -> float:
        return 2.0 * (self.alpha if sigma == "+" else self.beta)


def gibbs_row(scores: np.ndarray, epsilon: float, tau: float) -> tuple[np.ndarray, float]:
    """Power-tilted routing row and its outside-option (cemetery) mass.

    Scores are rescaled by their maximum before the power so tiny ``tau``
    neither overflows nor underflows.  An all-zero row with ``epsilon = 0``
    routes everything to the cemetery.
    """
    s = np.asarray(scores, dtype=float)
    top = max(float(s.max(initial=0.0)), epsilon)
    if top == 0.0:
        return np.zeros_like(s), 1.0
    t = (s / top) ** (1.0 / tau)
    e = (epsilon / top) ** (1.0 / tau) if epsilon > 0 else 0.0
    den = e + math.fsum(t)
    return t / den, e / den


def fanin_entropy(W: np.ndarray) -> np.ndarray:
    """Entropy of ``|W_j.| / sum |W_j.|`` per row, normalised by ``log(fan-in)``."""
    n = W.shape[1]
    if n <= 1:
        return np.zeros(W.shape[0])
    aw = np.abs(W)
    tot = aw.sum(axis=1, keepdims=True)
    p = np.divide(aw, tot, out=np.zeros_like(aw), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return h / math.log(n)


@dataclass
class DenseRouting:
    cont: np.ndarray  # continue probability per neuron
    z_eff: np.ndarray  # gate input after the entropy shift
    values: np.ndarray  # predecessor values feeding the scores
    scores: dict[str, np.ndarray]  # sigma -> (n_m, n_{m-1})
    pi: dict[str, np.ndarray]
    pi_cem: dict[str, np.ndarray]


@dataclass
class AttnRouting:
    A: np.ndarray
    Pp: np.ndarray
    Pm: np.ndarray
    vp: np.ndarray
    vm: np.ndarray


@dataclass
class RGKernel:
    net: NetSpec
    x: np.ndarray
    cfg: RGConfig
    fwd: ForwardResult
    mp: LayeredMP
    depth_of: list[int]  # MP depth of each node
    dense: dict[int, DenseRouting] = field(default_factory=dict)
    attention: dict[int, AttnRouting] = field(default_factory=dict)
    terminals: str = "player"


def _node_depths(net: NetSpec) -> list[int]:
    depths, shift = [0], 0
    for m, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Attention):
            shift += 1
        depths.append(m + shift)
    return depths


def build_rg(net: NetSpec, x: Sequence[float], cfg: RGConfig = RGConfig(),
             adf: MomentField | None = None, terminals: str = "player") -> RGKernel:
    """Routing-Game kernel.  ``terminals`` tags pixel states by player or by stream."""
    if terminals not in ("player", "stream"):
        raise ValueError("terminals must be 'player' or 'stream'")
    fwd = forward(net, x)
    if adf is None and (cfg.lam < 0 or cfg.lambda_sm < 0):
        adf = adf_forward(net, fwd.a[0], cfg.sigma2, fwd=fwd)
    depth = _node_depths(net)
    b = MPBuilder(depth[-1])
    kernel = RGKernel(net, fwd.a[0], cfg, fwd, None, depth, terminals=terminals)  # type: ignore[arg-type]

    def target(node: int, i: int, player: str, sigma: str | None) -> tuple:
        if node > 0:
            return ("n", node, i, player)
        # residual and max-pool edges into the pixels have no sign branch
        return ("x", i, sigma if terminals == "stream" and sigma is not None else player)

    def values_of(node: int) -> np.ndarray:
        if node == 0 or cfg.lam == 0:
            return fwd.a[node]
        return risk_value(adf.mu[node], adf.var[node], cfg.lam)

    for m in range(net.depth, 0, -1):
        layer = net.node(m)
        dm = depth[m]
        width = net.widths[m]
        if isinstance(layer, Dense):
            v = values_of(m - 1)
            z = fwd.z[m]
            if cfg.lambda_ent > 0:
                z = z - cfg.lambda_ent * fanin_entropy(layer.W)
            c = ndtr(z) if cfg.gate == "probit" else (z > 0).astype(float)
            prod = v[None, :] * layer.W
            scores = {"+": np.maximum(prod, 0.0), "-": np.maximum(-prod, 0.0)}
            pi, pc = {}, {}
            for sg in SIGMAS:
                rows = [gibbs_row(scores[sg][j], cfg.epsilon, cfg.tau) for j in range(width)]
                pi[sg] = np.array([r[0] for r in rows]).reshape(width, -1)
                pc[sg] = np.array([r[1] for r in rows])
            kernel.dense[m] = DenseRouting(c, z, v, scores, pi, pc)
            for j in range(width):
                for p in PLAYERS:
                    src = ("n", m, j, p)
                    for sg in SIGMAS:
                        nxt = p if sg == "+" else _flip(p)
                        for i in range(net.widths[m - 1]):
                            b.edge(dm, src, depth[m - 1], target(m - 1, i, nxt, sg),
                                   c[j] * 0.5 * pi[sg][j, i], cfg.discount(sg))
        elif isinstance(layer, ResidualAdd):
            for j in range(width):
                for p in PLAYERS:
                    src = ("n", m, j, p)
                    b.edge(dm, src, depth[layer.left], target(layer.left, j, p, None), 0.5)
                    b.edge(dm, src, depth[layer.right], target(layer.right, j, p, None), 0.5)
        elif isinstance(layer, MaxPool):
            win = fwd.winners[m]
            for gi, group in enumerate(layer.groups):
                for p in PLAYERS:
                    for j in group:
                        b.edge(dm, ("n", m, gi, p), depth[m - 1], target(m - 1, j, p, None),
                               1.0 if j == win[gi] else 0.0)
        else:
            blk = AttentionBlock.from_layer(layer, fwd.a[m - 1])
            A = fwd.attention[m]["A"]
            if cfg.lambda_sm < 0:
                A = qk_oracle(blk, cfg.lambda_sm, adf.key_sigma[m])
            Pp, Pm, vp, vm = value_streams(blk)
            kernel.attention[m] = AttnRouting(A, Pp, Pm, vp, vm)
            S, D, dh = layer.tokens, layer.model_dim, layer.d_h
            streams = {"+": (Pp, vp), "-": (Pm, vm)}
            for sg in SIGMAS:
                P, vs = streams[sg]
                Z = A @ vs
                for q in range(S):
                    for d in range(dh):
                        for p in PLAYERS:
                            nxt = p if sg == "+" else _flip(p)
                            for k in range(S):
                                prob = 0.5 * A[q, k] * vs[k, d] / Z[q, d] if Z[q, d] > 0 else 0.0
                                b.edge(dm, ("n", m, q * dh + d, p), dm - 1,
                                       ("v", m, sg, k * dh + d, nxt), prob, cfg.discount(sg))
                for k in range(S):
                    for d in range(dh):
                        for p in PLAYERS:
                            src = ("v", m, sg, k * dh + d, p)
                            for e in range(D):
                                prob = P[k, e, d] / vs[k, d] if vs[k, d] > 0 else 0.0
                                b.edge(dm - 1, src, depth[m - 1],
                                       target(m - 1, k * D + e, p, sg), prob)
    kernel.mp = b.build(("n", net.depth, net.output_neuron, "+"))
    return kernel


@dataclass
class RelevanceMap:
    """Signed relevance per node (``layers[0]`` is the input map)."""

    layers: list[np.ndarray]
    seed: float

    @property
    def input(self) -> np.ndarray:
        return self.layers[0]

    def to_json(self) -> list[dict]:
        return [{"layer": l, "values": r.tolist()} for l, r in enumerate(self.layers)]


def _relevance_from_gamma(kernel: RGKernel, gamma: list[np.ndarray], seed: float) -> RelevanceMap:
    return RelevanceMap([seed * r for r in node_differences(kernel.net, kernel.mp, gamma)], seed)


def rg_attribution(net: NetSpec, x: Sequence[float], cfg: RGConfig = RGConfig(),
                   seed: float | None = None, adf: MomentField | None = None
                   ) -> tuple[RelevanceMap, OccupationResult]:
    """``R_i = seed * (Gamma(s_{i,+}) - Gamma(s_{i,-}))``; the seed defaults to ``f(x)``."""
    kernel = build_rg(net, x, cfg, adf, terminals="player")
    gamma = occupation(kernel.mp)
    unit = _relevance_from_gamma(kernel, gamma, 1.0)
    s = kernel.fwd.output if seed is None else float(seed)
    rel = RelevanceMap([s * r for r in unit.layers], s)
    return rel, OccupationResult(kernel.mp, gamma, unit.input)


def rg_trajectory_mp(net: NetSpec, x: Sequence[float], cfg: RGConfig = RGConfig(),
                     adf: MomentField | None = None) -> LayeredMP:
    """Probability-space Routing-Game process with stream-tagged pixel terminals."""
    return build_rg(net, x, cfg, adf, terminals="stream").mp


@dataclass
class RGValues:
    """Log-space game values of the dense nodes.

    ``linear[m][sigma][j]`` is the value of the sign-``sigma`` linear state of
    neuron ``j``; ``activation[m]`` the value ``log v`` of node ``m``'s neurons
    as seen by their successors; ``payoff[m][sigma][j, i]`` the immediate
    log-payoff of routing ``j -> i``.
    """

    linear: dict[int, dict[str, np.ndarray]]
    activation: dict[int, np.ndarray]
    payoff: dict[int, dict[str, np.ndarray]]


def rg_values(kernel: RGKernel) -> RGValues:
    cfg = kernel.cfg
    lin, act, pay = {}, {}, {}
    with np.errstate(divide="ignore"):
        for m, r in kernel.dense.items():
            lin[m] = {}
            pay[m] = {}
            W = kernel.net.node(m).W
            for sg in SIGMAS:
                s = r.scores[sg]
                tot = (cfg.epsilon ** (1.0 / cfg.tau) if cfg.epsilon > 0 else 0.0) + \
                    (s ** (1.0 / cfg.tau)).sum(axis=1)
                lin[m][sg] = cfg.tau * np.log(tot)
                part = np.maximum(W, 0.0) if sg == "+" else np.maximum(-W, 0.0)
                pay[m][sg] = np.log(s) if m == 1 else np.log(part)
            act[m - 1] = np.log(r.values)
    return RGValues(lin, act, pay)


# ---------------------------------------------------------------------------
# direct recursion


def lrp_direct(net: NetSpec, x: Sequence[float], alpha: float, beta: float, epsilon: float,
               seed: float | None = None) -> RelevanceMap:
    """Stabilised alpha-beta rule applied node by node, seeded at the output neuron."""
    fwd = forward(net, x)
    R = [np.zeros(w) for w in net.widths]
    s = fwd.output if seed is None else float(seed)
    R[-1][net.output_neuron] = s
    for m in range(net.depth, 0, -1):
        layer = net.node(m)
        Rm = R[m]
        if isinstance(layer, Dense):
            Rj = np.where(fwd.z[m] > 0, Rm, 0.0)
            prod = fwd.a[m - 1][None, :] * layer.W
            for sign, coef in ((1.0, alpha), (-1.0, beta)):
                part = np.maximum(sign * prod, 0.0)
                den = epsilon + part.sum(axis=1)
                share = np.divide(part, den[:, None], out=np.zeros_like(part),
                                  where=den[:, None] > 0)
                R[m - 1] += sign * coef * (share.T @ Rj)
        elif isinstance(layer, ResidualAdd):
            R[layer.left] += 0.5 * Rm
            R[layer.right] += 0.5 * Rm
        elif isinstance(layer, MaxPool):
            np.add.at(R[m - 1], fwd.winners[m], Rm)
        else:
            blk = AttentionBlock.from_layer(layer, fwd.a[m - 1])
            R[m - 1] += attn_lrp(blk, Rm, alpha, beta).R_X.reshape(-1)
    return RelevanceMap(R, s)


def attention_walk(blk: AttentionBlock, R_O: np.ndarray, alpha: float, beta: float
                   ) -> np.ndarray:
    """Input relevance of a lone attention block from Routing-Game occupation.

    One game is played per output entry ``(q, d)``, seeded with ``R_O[q, d]``.
    """
    layer = blk.as_layer()
    cfg = RGConfig(alpha, beta, 0.0)
    out = np.zeros(blk.X.size)
    for o, r in enumerate(np.asarray(R_O, dtype=float).reshape(-1)):
        if r != 0:
            net = NetSpec(blk.X.size, o, (layer,))
            k = build_rg(net, blk.X.reshape(-1), cfg)
            out += r * _relevance_from_gamma(k, occupation(k.mp), 1.0).input
    return out.reshape(blk.X.shape)
