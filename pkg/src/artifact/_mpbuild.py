"""Incremental construction of a ``LayeredMP`` from a sparse edge list.

Edges that skip layers (residual operands below the node directly underneath)
are threaded through deterministic relay states, one per intermediate layer.
Relays are created for every registered edge, including zero-probability
ones, so the label set depends only on the network topology.
"""

from __future__ import annotations

from typing import Hashable

import numpy as np

from .trajectory_mp import LayeredMP


class MPBuilder:
    def __init__(self, top: int):
        self.top = top
        self._labels: list[dict[Hashable, int]] = [dict() for _ in range(top + 1)]
        # (depth, src) -> {(dst_depth, dst): [prob, prob * discount]}
        self._edges: dict[tuple[int, Hashable], dict[tuple[int, Hashable], list[float]]] = {}
        self._cemetery: dict[tuple[int, Hashable], float] = {}

    def state(self, depth: int, label: Hashable) -> None:
        self._labels[depth].setdefault(label, len(self._labels[depth]))

    def edge(self, depth: int, src: Hashable, dst_depth: int, dst: Hashable,
             prob: float, discount: float = 1.0) -> None:
        if dst_depth >= depth:
            raise ValueError("edges must point to a lower layer")
        self.state(depth, src)
        self.state(dst_depth, dst)
        slot = self._edges.setdefault((depth, src), {}).setdefault((dst_depth, dst), [0.0, 0.0])
        slot[0] += prob
        slot[1] += prob * discount
        if prob == 0.0 and slot[0] == 0.0:
            slot[1] = discount  # remember the structural discount of a silent edge

    def cemetery(self, depth: int, src: Hashable, prob: float) -> None:
        """Explicit cemetery mass for a row; otherwise it is one minus the routed mass."""
        self.state(depth, src)
        self._cemetery[(depth, src)] = prob

    def build(self, start: Hashable) -> LayeredMP:
        rows: dict[tuple[int, Hashable], dict[tuple[int, Hashable], tuple[float, float]]] = {}
        for (d, src), outs in self._edges.items():
            for (dd, dst), (p, pd) in outs.items():
                disc = pd / p if p > 0 else pd
                if dd == d - 1:
                    _add(rows, (d, src), (dd, dst), p, disc)
                    continue
                chain = [(k, ("r", k) + (dst if isinstance(dst, tuple) else (dst,)))
                         for k in range(d - 1, dd, -1)]
                for k, relay in chain:
                    self.state(k, relay)
                _add(rows, (d, src), chain[0], p, disc)
                for a, b in zip(chain, chain[1:] + [(dd, dst)]):
                    rows.setdefault(a, {})[b] = (1.0, 1.0)
        labels = [list(layer) for layer in self._labels]
        kernels, discounts = [], []
        for l in range(1, self.top + 1):
            T = np.zeros((len(labels[l]), 1 + len(labels[l - 1])))
            G = np.ones_like(T)
            below = self._labels[l - 1]
            for i, src in enumerate(labels[l]):
                outs = rows.get((l, src), {})
                for (dd, dst), (p, disc) in outs.items():
                    j = 1 + below[dst]
                    T[i, j] = p
                    G[i, j] = disc
                routed = T[i, 1:].sum()
                cem = self._cemetery.get((l, src))
                if cem is None:
                    cem = 1.0 - routed
                    if cem < 1e-15:
                        cem = 0.0
                T[i, 0] = cem
            kernels.append(T)
            discounts.append(G)
        return LayeredMP(labels, kernels, self._labels[self.top][start], discounts)


def _add(rows, src, dst, p, disc):
    slot = rows.setdefault(src, {})
    if dst in slot:
        p0, d0 = slot[dst]
        tot = p0 + p
        slot[dst] = (tot, (p0 * d0 + p * disc) / tot if tot > 0 else disc)
    else:
        slot[dst] = (p, disc)
