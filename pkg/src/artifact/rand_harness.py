"""Parameter-randomisation and input-noise experiments on trajectory distances, plus the cemetery floor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._mpbuild import MPBuilder
from .net_core import Attention, Dense, NetSpec
from .routing_game import RGConfig, rg_trajectory_mp
from .stopping_game import build_sg_auto
from .trajectory_mp import (LayeredMP, NoSurvivalError, conditioned_survival,
                            hellinger_backward)

__all__ = [
    "SweepResult",
    "NoiseSweepResult",
    "CemeteryFloor",
    "cascade_randomize",
    "randomize_layer",
    "dense_nodes",
    "game_mp",
    "pair_distances",
    "randomization_sweep",
    "input_noise_sweep",
    "cemetery_floor",
    "mean_field_pair",
]

GAMES = ("SG", "RG")


def dense_nodes(net: NetSpec) -> list[int]:
    return [l for l, layer in enumerate(net.layers, start=1) if isinstance(layer, Dense)]


def _redraw(net: NetSpec, nodes: Sequence[int], seed: int) -> NetSpec:
    layers = list(net.layers)
    for l in nodes:
        old = layers[l - 1]
        rng = np.random.default_rng([seed, l])
        fan_in = old.W.shape[1]
        W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=old.W.shape)
        layers[l - 1] = Dense(W, np.zeros_like(old.b), old.activation)
    return NetSpec(net.input_dim, net.output_neuron, tuple(layers))


def cascade_randomize(net: NetSpec, depth: int, seed: int) -> NetSpec:
    """Redraw the ``depth`` dense layers closest to the output (Kaiming normal, fan-in, zero bias).

    Each layer draws from its own stream keyed by ``(seed, node)``, so a
    deeper cascade with the same seed extends a shallower one.
    """
    nodes = dense_nodes(net)
    if not 0 <= depth <= len(nodes):
        raise ValueError(f"depth must lie in [0, {len(nodes)}]")
    if depth == 0:
        return net
    return _redraw(net, nodes[len(nodes) - depth:], seed)


def randomize_layer(net: NetSpec, node: int, seed: int) -> NetSpec:
    """Redraw a single dense node, leaving every other layer intact."""
    if node not in dense_nodes(net):
        raise ValueError(f"node {node} is not a dense layer")
    return _redraw(net, [node], seed)


def game_mp(game: str, net: NetSpec, x: Sequence[float], cfg: RGConfig = RGConfig()) -> LayeredMP:
    if game == "SG":
        return build_sg_auto(net, x).mp
    if game == "RG":
        return rg_trajectory_mp(net, x, cfg)
    raise ValueError(f"unknown game {game!r}")


def pair_distances(mpA: LayeredMP, mpB: LayeredMP) -> tuple[float, float]:
    """``(H, H_surv)``; ``H_surv`` is NaN when either model has no surviving mass."""
    H = hellinger_backward(mpA, mpB).H
    try:
        Hs = conditioned_survival(mpA, mpB).h_surv
    except NoSurvivalError:
        Hs = math.nan
    return H, Hs


def _stats(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return math.nan, math.nan
    return float(finite.mean()), float(finite.std())


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)

    def column(self, game: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["game"] == game])

    def to_json(self) -> list[dict]:
        return [dict(r) for r in self.rows]

    def to_csv(self) -> str:
        cols = ["step", "layer", "game", "H_mean", "H_std", "Hsurv_mean", "Hsurv_std"]
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(
                str(r[c]) if isinstance(r[c], (int, str)) else "%.17g" % r[c] for c in cols))
        return "\n".join(lines) + "\n"


def _games_for(net: NetSpec, games: Sequence[str]) -> list[str]:
    has_attn = any(isinstance(layer, Attention) for layer in net.layers)
    return [g for g in games if not (g == "SG" and has_attn)]


def randomization_sweep(net: NetSpec, inputs: Sequence[Sequence[float]], cfg: RGConfig = RGConfig(),
                        seeds: Sequence[int] = (0,), games: Sequence[str] = GAMES) -> SweepResult:
    """H and H_surv between the net and its cascaded randomisations, step 0 (none) to all dense layers."""
    nodes = dense_nodes(net)
    games = _games_for(net, games)
    base = {(g, i): game_mp(g, net, x, cfg) for g in games for i, x in enumerate(inputs)}
    result = SweepResult()
    for step in range(len(nodes) + 1):
        layer = "none" if step == 0 else f"layers/{nodes[len(nodes) - step] - 1}"
        nets = [cascade_randomize(net, step, s) for s in seeds]
        for g in games:
            hs, hss = [], []
            for other in nets:
                for i, x in enumerate(inputs):
                    H, Hs = pair_distances(base[(g, i)], game_mp(g, other, x, cfg))
                    hs.append(H)
                    hss.append(Hs)
            hm, hsd = _stats(hs)
            sm, ssd = _stats(hss)
            result.rows.append({"step": step, "layer": layer, "game": g, "H_mean": hm,
                                "H_std": hsd, "Hsurv_mean": sm, "Hsurv_std": ssd})
    return result


@dataclass
class NoiseSweepResult:
    sigmas: np.ndarray
    H_mean: np.ndarray
    H_std: np.ndarray
    Hsurv_mean: np.ndarray
    Hsurv_std: np.ndarray
    game: str

    def to_sweep(self) -> SweepResult:
        res = SweepResult()
        for k, s in enumerate(self.sigmas):
            res.rows.append({"step": k, "layer": "sigma=%.17g" % s, "game": self.game,
                             "H_mean": float(self.H_mean[k]), "H_std": float(self.H_std[k]),
                             "Hsurv_mean": float(self.Hsurv_mean[k]),
                             "Hsurv_std": float(self.Hsurv_std[k])})
        return res


def input_noise_sweep(net: NetSpec, x: Sequence[float], sigmas: Sequence[float],
                      cfg: RGConfig = RGConfig(), seed: int = 0, draws: int = 16,
                      game: str = "RG") -> NoiseSweepResult:
    """``H(Pi(x), Pi(x + sigma eps))`` averaged over ``draws`` noise vectors.

    The same ``eps`` draws are reused at every ``sigma`` so the curve varies
    only through the noise scale.
    """
    x = np.asarray(x, dtype=float)
    eps = np.random.default_rng(seed).standard_normal((draws, x.size))
    ref = game_mp(game, net, x, cfg)
    out = {k: [] for k in ("H_mean", "H_std", "Hsurv_mean", "Hsurv_std")}
    for s in sigmas:
        hs, hss = [], []
        for e in eps:
            H, Hs = pair_distances(ref, game_mp(game, net, x + s * e, cfg))
            hs.append(H)
            hss.append(Hs)
        for key, val in zip(out, (*_stats(hs), *_stats(hss))):
            out[key].append(val)
    return NoiseSweepResult(np.asarray(sigmas, dtype=float), *(np.array(out[k]) for k in out),
                            game=game)


@dataclass(frozen=True)
class CemeteryFloor:
    d: float
    kappa: float
    c0: float
    f0_bound: float
    bc_bound: float
    asymptote: float

    @property
    def h_asymptote(self) -> float:
        return math.sqrt(max(1.0 - self.asymptote, 0.0))


def cemetery_floor(q: float, p: float, delta: float, N: float) -> CemeteryFloor:
    """Dead-in-both cemetery mass after ``N`` randomised layers under the mean-field model.

    ``N`` may be ``math.inf``, in which case ``c0`` is the asymptote.
    """
    if not (0 <= q <= 1 and 0 <= p <= 1):
        raise ValueError("q and p must lie in [0, 1]")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not N >= 1:
        raise ValueError("N must be at least 1")
    d = q * (1.0 - p)
    kappa = (1.0 - delta) * (1.0 - d)
    asym = d / (1.0 - kappa) if kappa < 1 else math.inf
    if math.isinf(N):
        c0, f0 = asym, 0.0
    elif kappa == 1.0:
        c0, f0 = d * N, 1.0
    else:
        f0 = kappa ** N
        c0 = d * (1.0 - f0) / (1.0 - kappa)
    return CemeteryFloor(d, kappa, c0, f0, c0 + f0, asym)


def mean_field_pair(d: float, kappa: float, N: int, n: int) -> tuple[LayeredMP, LayeredMP]:
    """Two processes realising the mean-field assumptions exactly.

    The start state routes uniformly into ``N`` stacked layers of ``n``
    states each.  In every layer a fraction ``d`` of states is dead in both
    models, a fraction ``kappa`` is alive in both with identical uniform rows,
    and the rest is alive only in model A.  Then ``BC^(0) = kappa^N + c0``.
    """
    nd, nk = d * n, kappa * n
    if abs(nd - round(nd)) > 1e-9 or abs(nk - round(nk)) > 1e-9 or round(nd) + round(nk) > n:
        raise ValueError("d * n and kappa * n must be integers summing to at most n")
    nd, nk = int(round(nd)), int(round(nk))
    mps = []
    for model in "AB":
        b = MPBuilder(N + 1)
        for i in range(n):
            b.edge(N + 1, "s0", N, ("h", N, i), 1.0 / n)
        for l in range(N, 0, -1):
            for i in range(n):
                src = ("h", l, i)
                alive = nd <= i < nd + nk or (i >= nd + nk and model == "A")
                for j in range(n):
                    dst = ("h", l - 1, j) if l > 1 else ("x", j)
                    b.edge(l, src, l - 1, dst, 1.0 / n if alive else 0.0)
                b.cemetery(l, src, 0.0 if alive else 1.0)
        mps.append(b.build("s0"))
    return mps[0], mps[1]
