"""Brute-force oracles: trajectory enumeration, parity path sums and finite differences."""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.special import ndtr

from .net_core import Activation, Dense, MaxPool, NetSpec, NetSpecError, ResidualAdd, forward
from .trajectory_mp import CEMETERY, LayeredMP

__all__ = [
    "TrajectoryList",
    "EnumerationGuardError",
    "GateBoundaryError",
    "enumerate",
    "oracle_bc",
    "oracle_marginal",
    "oracle_occupation",
    "oracle_tv",
    "conditioned_law",
    "parity_path_sum",
    "finite_diff_gradient",
]

MAX_TRAJECTORIES = 10**7

_enum = builtins.enumerate  # the public ``enumerate`` below shadows the builtin


class EnumerationGuardError(RuntimeError):
    pass


class GateBoundaryError(ValueError):
    """A pre-activation is too close to a gate boundary for a clean difference quotient."""


@dataclass
class TrajectoryList:
    """Trajectories as tuples of ``(depth, label)`` from the start down to a pixel or the cemetery.

    ``discounts[i]`` lists the cumulative discount at each step of trajectory ``i``.
    """

    paths: list[tuple[tuple[int, Hashable], ...]]
    probs: list[float]
    discounts: list[list[float]]

    @property
    def total(self) -> float:
        return math.fsum(self.probs)

    def law(self) -> dict[tuple, float]:
        out: dict[tuple, float] = {}
        for path, p in zip(self.paths, self.probs):
            out[path] = out.get(path, 0.0) + p
        return out


def enumerate(mp: LayeredMP, limit: int = MAX_TRAJECTORIES, keep_zero: bool = False
              ) -> TrajectoryList:
    """Every trajectory of positive probability; paths end at the first cemetery step."""
    disc = mp.discounts
    paths, probs, discs = [], [], []
    stack = [(mp.L, mp.start, ((mp.L, mp.labels[mp.L][mp.start]),), 1.0, [1.0])]
    while stack:
        l, i, path, p, d = stack.pop()
        if l == 0:
            paths.append(path)
            probs.append(p)
            discs.append(d)
            if len(paths) > limit:
                raise EnumerationGuardError(f"more than {limit} trajectories")
            continue
        row = mp.kernels[l - 1][i]
        for j in range(row.size - 1, -1, -1):
            q = row[j]
            if q == 0 and not keep_zero:
                continue
            step = disc[l - 1][i, j] if disc is not None else 1.0
            if j == 0:
                paths.append(path + ((l - 1, CEMETERY),))
                probs.append(p * q)
                discs.append(d + [d[-1] * step])
                if len(paths) > limit:
                    raise EnumerationGuardError(f"more than {limit} trajectories")
            else:
                stack.append((l - 1, j - 1, path + ((l - 1, mp.labels[l - 1][j - 1]),), p * q,
                              d + [d[-1] * step]))
    return TrajectoryList(paths, probs, discs)


def _terminal_key(path) -> Hashable:
    return CEMETERY if path[-1][1] == CEMETERY else path[-1][1]


def oracle_marginal(mp: LayeredMP) -> dict[Hashable, float]:
    """Layer-0 law (cemetery included) by summing over trajectories."""
    out: dict[Hashable, list[float]] = {}
    traj = enumerate(mp)
    for path, p in zip(traj.paths, traj.probs):
        out.setdefault(_terminal_key(path), []).append(p)
    return {k: math.fsum(v) for k, v in out.items()}


def _canonical(path):
    # a trajectory that dies is identified by its path up to the first cemetery step
    return tuple(lab for _, lab in path)


def oracle_bc(mpA: LayeredMP, mpB: LayeredMP) -> float:
    """``sum over trajectories of sqrt(P_A P_B)``."""
    la = {_canonical(k): v for k, v in enumerate(mpA).law().items()}
    lb = {_canonical(k): v for k, v in enumerate(mpB).law().items()}
    return math.fsum(math.sqrt(p * lb[k]) for k, p in la.items() if k in lb)


def oracle_tv(mpA: LayeredMP, mpB: LayeredMP) -> float:
    la = {_canonical(k): v for k, v in enumerate(mpA).law().items()}
    lb = {_canonical(k): v for k, v in enumerate(mpB).law().items()}
    keys = set(la) | set(lb)
    return 0.5 * math.fsum(abs(la.get(k, 0.0) - lb.get(k, 0.0)) for k in keys)


def conditioned_law(mp: LayeredMP) -> dict[tuple, float]:
    """Trajectory law restricted to paths reaching an ordinary pixel, renormalised."""
    law = {_canonical(k): v for k, v in enumerate(mp).law().items() if k[-1][1] != CEMETERY}
    Z = math.fsum(law.values())
    if Z <= 0:
        raise ValueError("no surviving mass")
    return {k: v / Z for k, v in law.items()}


def oracle_occupation(mp: LayeredMP,
                      discount: Callable[[int, int, int], float] | None = None
                      ) -> list[np.ndarray]:
    """``Gamma(v) = sum_tau p(tau) sum_t d_t(tau) 1{tau_t = v}`` on ordinary states.

    ``discount(l, i, j)`` is the step discount from state ``i`` of layer ``l``
    to column ``j`` of its kernel (0 is the cemetery); defaults to the
    process's own discounts.
    """
    if discount is None:
        def discount(l, i, j):
            return mp.discounts[l - 1][i, j] if mp.discounts is not None else 1.0
    terms: list[list[list[float]]] = [[[] for _ in range(mp.width(l))] for l in range(mp.L + 1)]
    traj = enumerate(mp)
    for path, p in zip(traj.paths, traj.probs):
        cum = 1.0
        prev = None
        for l, lab in path:
            if lab == CEMETERY:
                break
            i = mp.index(l, lab)
            if prev is not None:
                cum *= discount(l + 1, prev, 1 + i)
            terms[l][i].append(p * cum)
            prev = i
    return [np.array([math.fsum(v) for v in terms[l]]) for l in range(mp.L + 1)]


def parity_path_sum(net: NetSpec, x: Sequence[float], layer: int, neuron: int,
                    limit: int = MAX_TRAJECTORIES) -> tuple[float, float]:
    """``(z+, z-)`` of a neuron as sums of ``|w(P)| x^(sign)`` over gated backward paths.

    A path from the neuron down to pixel ``k`` passes only through open
    hidden gates; its weight is the product of absolute weights and its
    parity is the number of negative weights.  Even paths collect ``x_k^+``
    into ``z+`` and ``x_k^-`` into ``z-``; odd paths swap them.
    """
    if not all(isinstance(lay, Dense) for lay in net.layers):
        raise NetSpecError("the parity oracle covers dense nets only")
    if any(np.any(lay.b != 0) for lay in net.layers):
        raise NetSpecError("the parity oracle covers bias-free nets only")
    fwd = forward(net, x)
    x = fwd.a[0]
    xp, xm = np.maximum(x, 0.0), np.maximum(-x, 0.0)
    zp, zm = [], []
    count = 0

    def walk(l: int, i: int, w: float, odd: bool):
        nonlocal count
        W = net.node(l).W
        for j in range(W.shape[1]):
            wij = W[i, j]
            if wij == 0:
                continue
            ww, par = w * abs(wij), odd ^ (wij < 0)
            if l == 1:
                count += 1
                if count > limit:
                    raise EnumerationGuardError(f"more than {limit} paths")
                zp.append(ww * (xm[j] if par else xp[j]))
                zm.append(ww * (xp[j] if par else xm[j]))
            elif fwd.z[l - 1][j] > 0:
                walk(l - 1, j, ww, par)

    walk(layer, neuron, 1.0, False)
    return math.fsum(zp), math.fsum(zm)


def finite_diff_gradient(net: NetSpec, x: Sequence[float], h: float = 1e-5,
                         detach_gelu_gates: bool = False) -> np.ndarray:
    """Central differences of the scalar output.

    Raises ``GateBoundaryError`` when some ReLU pre-activation has ``|z| <= 10 h``.
    With ``detach_gelu_gates`` every GELU unit is replaced by ``z * Phi(z0)``
    with ``z0`` frozen at ``x``, which is the gradient the probit-gated game
    recovers.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    base = forward(net, x)
    for l, layer in _enum(net.layers, start=1):
        if isinstance(layer, Dense) and layer.activation.kind == "relu":
            if np.any(np.abs(base.z[l]) <= 10 * h):
                raise GateBoundaryError(f"pre-activation within 10h of zero at node {l}; resample x")
    f = _frozen_output(net, base) if detach_gelu_gates else (lambda v: forward(net, v).output)
    grad = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        grad[k] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def _frozen_output(net: NetSpec, base) -> Callable[[np.ndarray], float]:
    gates = {l: ndtr(base.z[l]) for l, layer in _enum(net.layers, start=1)
             if isinstance(layer, Dense) and layer.activation == Activation("gelu")}

    def f(v: np.ndarray) -> float:
        a = [v]
        for l, layer in _enum(net.layers, start=1):
            if isinstance(layer, Dense):
                z = layer.W @ a[l - 1] + layer.b
                a.append(z * gates[l] if l in gates else layer.activation(z))
            elif isinstance(layer, ResidualAdd):
                a.append(a[layer.left] + a[layer.right])
            elif isinstance(layer, MaxPool):
                a.append(a[l - 1][base.winners[l]])
            else:
                raise NetSpecError("frozen-gate differences cover dense/residual/max-pool nets")
        return float(a[-1][net.output_neuron])

    return f
