"""The Stopping Game: a two-player backward game whose occupation measure is the gradient.

States are ``("n", l, i, p)`` for neuron ``i`` of node ``l`` with player ``p``
in turn, and ``("x", k, p)`` for the input terminals.  From an activation
state the player either stops (cemetery) or continues to a predecessor
chosen with probability ``|W_ij| / gamma_i``; a negative weight hands the
turn to the opponent.  The continuation carries the discount ``gamma_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from scipy.special import expit, ndtr

from ._mpbuild import MPBuilder
from .net_core import (Attention, Dense, ForwardResult, MaxPool, NetSpec, NetSpecError,
                       ResidualAdd, binary_entropy, forward)
from .trajectory_mp import LayeredMP, occupation

__all__ = [
    "PLAYERS",
    "SGKernel",
    "SGPlayerValues",
    "OccupationResult",
    "build_sg",
    "build_sg_softplus",
    "sg_probit_gate",
    "sg_player_values",
    "sg_occupation",
    "sg_gradient",
    "sg_trajectory_mp",
    "soft_stop_value",
    "probit_gate_value",
    "sg_state",
    "node_differences",
]

PLAYERS = ("+", "-")


def _other(p: str) -> str:
    return "-" if p == "+" else "+"


def sg_state(node: int, i: int, p: str) -> tuple:
    return ("x", i, p) if node == 0 else ("n", node, i, p)


@dataclass(frozen=True)
class Gate:
    kind: str  # "hard" | "softplus" | "probit"
    theta: float | None = None

    def continue_prob(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "hard":
            return (z > 0).astype(float)
        if self.kind == "softplus":
            return expit(z / self.theta)
        return ndtr(z)

    def bonus(self, c: np.ndarray) -> np.ndarray:
        """Entropy surplus of the player in turn (Softplus only)."""
        if self.kind == "softplus":
            return self.theta * binary_entropy(c)
        return np.zeros_like(c)


@dataclass
class SGKernel:
    net: NetSpec
    x: np.ndarray
    fwd: ForwardResult
    mp: LayeredMP
    gates: dict[int, Gate]
    cont: dict[int, np.ndarray]  # continue probability per dense neuron
    gamma: dict[int, np.ndarray]  # structural discount sum_j |W_ij|
    winners: dict[int, np.ndarray]

    def row(self, node: int, i: int, p: str) -> dict[Hashable, float]:
        """Continuation distribution of an activation state (conditioned on continuing)."""
        layer = self.net.node(node)
        if not isinstance(layer, Dense):
            raise ValueError("rows with weight structure exist at dense nodes only")
        g = self.gamma[node][i]
        out: dict[Hashable, float] = {}
        if g == 0:
            return out
        for j, w in enumerate(layer.W[i]):
            if w != 0:
                r = p if w > 0 else _other(p)
                out[sg_state(node - 1, j, r)] = abs(w) / g
        return out


def _check_sg_net(net: NetSpec) -> None:
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Attention):
            raise NetSpecError("the Stopping Game is defined on dense/residual/max-pool graphs; "
                               "attention is routed by the Routing Game only", f"/layers/{l - 1}")


def _auto_gate(layer: Dense) -> Gate:
    act = layer.activation
    if act.kind == "relu":
        return Gate("hard")
    if act.kind == "softplus":
        return Gate("softplus", act.theta)
    return Gate("probit")


def _build(net: NetSpec, x: Sequence[float], gate_for) -> SGKernel:
    _check_sg_net(net)
    fwd = forward(net, x)
    L = net.depth
    b = MPBuilder(L)
    gates: dict[int, Gate] = {}
    cont: dict[int, np.ndarray] = {}
    gam: dict[int, np.ndarray] = {}
    for m in range(L, 0, -1):
        layer = net.node(m)
        width = net.widths[m]
        if isinstance(layer, Dense):
            gate = gate_for(m, layer)
            gates[m] = gate
            c = gate.continue_prob(fwd.z[m])
            g = np.abs(layer.W).sum(axis=1)
            cont[m], gam[m] = c, g
            for i in range(width):
                for p in PLAYERS:
                    src = sg_state(m, i, p)
                    live = g[i] > 0
                    scale = c[i] / g[i] if live else 0.0
                    for j, w in enumerate(layer.W[i]):
                        for r in PLAYERS:
                            same = r == p
                            part = max(w, 0.0) if same else max(-w, 0.0)
                            b.edge(m, src, m - 1, sg_state(m - 1, j, r), part * scale,
                                   g[i] if live else 1.0)
                    b.cemetery(m, src, 1.0 - c[i] if live else 1.0)
        elif isinstance(layer, ResidualAdd):
            for i in range(width):
                for p in PLAYERS:
                    src = sg_state(m, i, p)
                    b.edge(m, src, layer.left, sg_state(layer.left, i, p), 0.5, 2.0)
                    b.edge(m, src, layer.right, sg_state(layer.right, i, p), 0.5, 2.0)
                    b.cemetery(m, src, 0.0)
        elif isinstance(layer, MaxPool):
            win = fwd.winners[m]
            for gi, group in enumerate(layer.groups):
                for p in PLAYERS:
                    src = sg_state(m, gi, p)
                    for j in group:
                        b.edge(m, src, m - 1, sg_state(m - 1, j, p), 1.0 if j == win[gi] else 0.0)
                    b.cemetery(m, src, 0.0)
    mp = b.build(sg_state(L, net.output_neuron, "+"))
    return SGKernel(net, fwd.a[0], fwd, mp, gates, cont, gam, dict(fwd.winners))


def build_sg(net: NetSpec, x: Sequence[float]) -> SGKernel:
    """Stop-at-tie-breaks equilibrium kernel of a ReLU network."""
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense) and layer.activation.kind != "relu":
            raise NetSpecError("build_sg needs ReLU layers; use build_sg_softplus or "
                               "sg_probit_gate", f"/layers/{l - 1}/activation")
    return _build(net, x, lambda m, layer: Gate("hard"))


def build_sg_softplus(net: NetSpec, x: Sequence[float], theta: float) -> SGKernel:
    """Gibbs stop/continue at inverse temperature ``1/theta`` on a Softplus(theta) net."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense) and (layer.activation.kind != "softplus"
                                         or layer.activation.theta != theta):
            raise NetSpecError(f"expected Softplus({theta}) layers", f"/layers/{l - 1}/activation")
    return _build(net, x, lambda m, layer: Gate("softplus", theta))


def sg_probit_gate(net: NetSpec, x: Sequence[float]) -> SGKernel:
    """Continue with probability Phi(z) at every dense neuron of a ReLU or GELU net."""
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense) and layer.activation.kind == "softplus":
            raise NetSpecError("the probit gate applies to ReLU or GELU layers",
                               f"/layers/{l - 1}/activation")
    return _build(net, x, lambda m, layer: Gate("probit"))


def build_sg_auto(net: NetSpec, x: Sequence[float]) -> SGKernel:
    """Gate matched to each layer's activation (hard, Softplus Gibbs or probit)."""
    return _build(net, x, lambda m, layer: _auto_gate(layer))


def sg_trajectory_mp(net: NetSpec, x: Sequence[float]) -> LayeredMP:
    return build_sg_auto(net, x).mp


# ---------------------------------------------------------------------------
# player values


@dataclass
class SGPlayerValues:
    """Values indexed by parity: ``U[l][0]`` is for ``p == q``, ``U[l][1]`` for ``p != q``."""

    U: list[np.ndarray]
    Q: dict[int, np.ndarray]

    @staticmethod
    def _k(q: str, p: str) -> int:
        return 0 if p == q else 1

    def value(self, node: int, i: int, q: str, p: str) -> float:
        return float(self.U[node][self._k(q, p), i])

    def continuation(self, node: int, i: int, q: str, p: str) -> float:
        return float(self.Q[node][self._k(q, p), i])

    def advantage(self, node: int, i: int, q: str, p: str) -> float:
        return self.value(node, i, q, p) - self.value(node, i, q, _other(p))

    def continuation_advantage(self, node: int, i: int, q: str, p: str) -> float:
        return self.continuation(node, i, q, p) - self.continuation(node, i, q, _other(p))


def sg_player_values(kernel: SGKernel) -> SGPlayerValues:
    """Backward-induction values under the kernel's equilibrium policy.

    Terminal ``("x", k, q)`` pays player ``p`` the input part ``x^(p xor q)``;
    a continuing activation state pays ``b^(p xor q)`` plus the weighted
    values of its successors (the discount cancels the row normalisation).
    """
    net = kernel.net
    x = kernel.x
    U: list[np.ndarray] = [np.stack([np.maximum(x, 0.0), np.maximum(-x, 0.0)])]
    Q: dict[int, np.ndarray] = {}
    for m, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Dense):
            Wp, Wm = np.maximum(layer.W, 0.0), np.maximum(-layer.W, 0.0)
            below = U[m - 1]
            q_same = np.maximum(layer.b, 0.0) + Wp @ below[0] + Wm @ below[1]
            q_diff = np.maximum(-layer.b, 0.0) + Wp @ below[1] + Wm @ below[0]
            Q[m] = np.stack([q_same, q_diff])
            c = kernel.cont[m]
            bonus = kernel.gates[m].bonus(c)
            U.append(np.stack([c * q_same + bonus, c * q_diff]))
        elif isinstance(layer, ResidualAdd):
            U.append(U[layer.left] + U[layer.right])
        else:
            U.append(U[m - 1][:, kernel.winners[m]])
    return SGPlayerValues(U, Q)


# ---------------------------------------------------------------------------
# occupation and gradient


@dataclass
class OccupationResult:
    mp: LayeredMP
    gamma: list[np.ndarray]
    gradient: np.ndarray
    player_values: SGPlayerValues | None = None

    def at(self, label: Hashable) -> float:
        for l in range(self.mp.L + 1):
            if label in self.mp._index[l]:
                return float(self.gamma[l][self.mp.index(l, label)])
        raise KeyError(label)

    def by_label(self) -> dict[Hashable, float]:
        return {lab: float(g) for l in range(self.mp.L + 1)
                for lab, g in zip(self.mp.labels[l], self.gamma[l])}


def node_differences(net: NetSpec, mp: LayeredMP, gamma: list[np.ndarray]) -> list[np.ndarray]:
    """``Gamma(s_{i,+}) - Gamma(s_{i,-})`` per network node; player-tagged pixels form node 0."""
    out = [np.zeros(w) for w in net.widths]
    for d in range(mp.L + 1):
        for lab, g in zip(mp.labels[d], gamma[d]):
            if lab[0] == "n":
                out[lab[1]][lab[2]] += g if lab[3] == "+" else -g
            elif lab[0] == "x":
                out[0][lab[1]] += g if lab[2] == "+" else -g
    return out


def input_difference(mp: LayeredMP, gamma0: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n)
    for lab, g in zip(mp.labels[0], gamma0):
        out[lab[1]] += g if lab[2] == "+" else -g
    return out


def sg_occupation(kernel: SGKernel, start: Hashable | None = None) -> OccupationResult:
    mp = kernel.mp
    where = None
    if start is not None:
        where = next((l, mp.index(l, start)) for l in range(mp.L + 1) if start in mp._index[l])
    gamma = occupation(mp, start=where)
    grad = input_difference(mp, gamma[0], kernel.net.input_dim)
    return OccupationResult(mp, gamma, grad, sg_player_values(kernel))


def sg_gradient(net: NetSpec, x: Sequence[float]) -> np.ndarray:
    """``Gamma(s_{k,+}) - Gamma(s_{k,-})`` at every input pixel.

    The gate of each layer follows its activation: hard for ReLU, Gibbs for
    Softplus, and Phi(z) for GELU (the gate-detached GELU gradient).
    """
    kernel = build_sg_auto(net, x)
    return sg_occupation(kernel).gradient


def soft_stop_value(z: float, theta: float) -> float:
    """``max_pi pi z + theta H(pi)`` evaluated at its Gibbs maximiser ``pi = sigmoid(z/theta)``."""
    pi = float(expit(z / theta))
    return pi * z + theta * float(binary_entropy(pi))


def probit_gate_value(z: float) -> float:
    """``z Phi(z) + phi(z)``, equal to ``E[max(z + eps, 0)]`` for standard normal ``eps``."""
    return z * float(ndtr(z)) + math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
