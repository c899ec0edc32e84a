"""Layered Markov processes with a shared cemetery and the Hellinger machinery.

Every layer vector used here carries the cemetery at index 0 followed by the
ordinary states of that layer, so the per-layer transition is a plain
matrix product with the augmented kernel ``[[1, 0], [T_cem, T_ord]]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np

__all__ = [
    "CEMETERY",
    "LayeredMP",
    "MPStructureError",
    "NoSurvivalError",
    "HellingerResult",
    "ForwardPassResult",
    "ConditionedResult",
    "PermResult",
    "marginal_pass",
    "occupation",
    "hellinger_backward",
    "hellinger_forward",
    "conditioned_survival",
    "perm_invariant_hellinger",
    "apply_permutation",
    "aggregate_tags",
    "label_key",
]

CEMETERY = "†"

ROW_TOL = 1e-12


class MPStructureError(ValueError):
    """Two processes do not share a state graph, or a kernel is malformed."""


class NoSurvivalError(ValueError):
    """A process sends all of its mass to the cemetery."""


def label_key(label: Hashable) -> str:
    if isinstance(label, tuple):
        return "/".join(str(part) for part in label)
    return str(label)


@dataclass(frozen=True, eq=False)
class LayeredMP:
    """Backward kernels ``kernels[l - 1]`` map layer ``l`` to layer ``l - 1``.

    ``kernels[l - 1]`` has shape ``(n_l, 1 + n_{l-1})``; column 0 is the
    cemetery.  ``discounts`` (same shapes, optional) are multiplicative
    weights applied to the occupation mass carried along each edge.
    """

    labels: tuple[tuple[Hashable, ...], ...]
    kernels: tuple[np.ndarray, ...]
    start: int
    discounts: tuple[np.ndarray, ...] | None = None
    _index: tuple[dict, ...] = field(init=False, repr=False)

    def __post_init__(self):
        labels = tuple(tuple(layer) for layer in self.labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "kernels", tuple(np.asarray(k, dtype=float) for k in self.kernels))
        if self.discounts is not None:
            object.__setattr__(self, "discounts",
                               tuple(np.asarray(d, dtype=float) for d in self.discounts))
        object.__setattr__(self, "_index", tuple({lab: i for i, lab in enumerate(layer)}
                                                 for layer in labels))
        self._validate()

    def _validate(self) -> None:
        L = len(self.kernels)
        if len(self.labels) != L + 1 or L < 1:
            raise MPStructureError("need L >= 1 kernels and L + 1 label layers")
        for l in range(1, L + 1):
            T = self.kernels[l - 1]
            shape = (len(self.labels[l]), 1 + len(self.labels[l - 1]))
            if T.shape != shape:
                raise MPStructureError(f"kernel {l} has shape {T.shape}, expected {shape}")
            if np.any(T < 0) or not np.all(np.isfinite(T)):
                raise MPStructureError(f"kernel {l} has negative or non-finite entries")
            dev = np.abs(T.sum(axis=1) - 1.0)
            if dev.size and dev.max() > ROW_TOL:
                raise MPStructureError(f"kernel {l} row sums deviate from 1 by {dev.max():.3g}")
            if self.discounts is not None and self.discounts[l - 1].shape != shape:
                raise MPStructureError(f"discount {l} has the wrong shape")
        if not 0 <= self.start < len(self.labels[L]):
            raise MPStructureError("start state out of range")

    @property
    def L(self) -> int:
        return len(self.kernels)

    def width(self, l: int) -> int:
        return len(self.labels[l])

    def index(self, l: int, label: Hashable) -> int:
        return self._index[l][label]

    def augmented(self, l: int) -> np.ndarray:
        """``(1 + n_l, 1 + n_{l-1})`` kernel including the absorbing cemetery row."""
        T = self.kernels[l - 1]
        E = np.zeros((T.shape[0] + 1, T.shape[1]))
        E[0, 0] = 1.0
        E[1:] = T
        return E

    def same_graph(self, other: "LayeredMP") -> bool:
        return self.labels == other.labels and self.start == other.start

    def to_json(self) -> dict:
        layers = []
        for l in range(1, self.L + 1):
            T = self.kernels[l - 1]
            rows = {}
            for i, lab in enumerate(self.labels[l]):
                row = {CEMETERY: float(T[i, 0])} if T[i, 0] > 0 else {}
                for j, dst in enumerate(self.labels[l - 1]):
                    if T[i, j + 1] > 0:
                        row[label_key(dst)] = float(T[i, j + 1])
                rows[label_key(lab)] = row
            layers.append(rows)
        return {
            "labels": [[list(lab) if isinstance(lab, tuple) else lab for lab in layer]
                       for layer in self.labels],
            "start": self.start,
            "layers": layers,
            "kernels": [T.tolist() for T in self.kernels],
            "discounts": None if self.discounts is None else [d.tolist() for d in self.discounts],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LayeredMP":
        labels = [[tuple(lab) if isinstance(lab, list) else lab for lab in layer]
                  for layer in doc["labels"]]
        disc = doc.get("discounts")
        return cls(labels, [np.asarray(k) for k in doc["kernels"]], doc["start"],
                   None if disc is None else [np.asarray(d) for d in disc])


def _start_vector(mp: LayeredMP) -> np.ndarray:
    v = np.zeros(1 + mp.width(mp.L))
    v[1 + mp.start] = 1.0
    return v


def _fsum_vecmat(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Compensated ``v @ M`` (one exactly rounded sum per output column)."""
    prod = v[:, None] * M
    return np.array([math.fsum(prod[:, j]) for j in range(M.shape[1])])


def _fsum_matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    prod = M * v[None, :]
    return np.array([math.fsum(prod[i]) for i in range(M.shape[0])])


def marginal_pass(mp: LayeredMP) -> list[np.ndarray]:
    """Layer marginals ``alpha[l]`` (cemetery first), from ``delta_{s0}`` at layer L down to 0."""
    alpha: list[np.ndarray] = [np.empty(0)] * (mp.L + 1)
    alpha[mp.L] = _start_vector(mp)
    for l in range(mp.L, 0, -1):
        alpha[l - 1] = _fsum_vecmat(alpha[l], mp.augmented(l))
    return alpha


def occupation(mp: LayeredMP, discounts: Sequence[np.ndarray] | None = None,
               start: tuple[int, int] | None = None) -> list[np.ndarray]:
    """Discounted occupation ``Gamma[l]`` on ordinary states (no cemetery entry).

    Mass at each state is pushed along its row multiplied by the edge discount;
    stopped mass leaves the ordinary states and is not counted.  ``start`` is
    ``(layer, index)`` and defaults to the process start state.
    """
    disc = discounts if discounts is not None else mp.discounts
    l0, i0 = start if start is not None else (mp.L, mp.start)
    gamma = [np.zeros(mp.width(l)) for l in range(mp.L + 1)]
    gamma[l0][i0] = 1.0
    for l in range(l0, 0, -1):
        W = mp.kernels[l - 1][:, 1:]
        if disc is not None:
            W = W * disc[l - 1][:, 1:]
        gamma[l - 1] = gamma[l] @ W
    return gamma


# ---------------------------------------------------------------------------
# Hellinger passes


@dataclass
class HellingerResult:
    labels0: tuple[Hashable, ...]
    bc: np.ndarray  # bc[l], l = 0..L
    h: np.ndarray  # h[l] from the squared-difference pass, not from 1 - bc[l]
    beta: list[np.ndarray]  # beta[l] with cemetery at index 0
    alpha_A: list[np.ndarray]
    alpha_B: list[np.ndarray]
    h2: np.ndarray  # per terminal, cemetery at index 0
    h2_marg: np.ndarray
    frac: np.ndarray
    Z_A: float
    Z_B: float

    @property
    def beta0(self) -> np.ndarray:
        return self.beta[0]

    @property
    def alpha0_A(self) -> np.ndarray:
        return self.alpha_A[0]

    @property
    def alpha0_B(self) -> np.ndarray:
        return self.alpha_B[0]

    @property
    def H(self) -> float:
        return float(self.h[0])

    @property
    def H2(self) -> float:
        return float(1.0 - self.bc[0])

    @property
    def bc_ord(self) -> float:
        return math.fsum(self.beta[0][1:])

    @property
    def h2_ord(self) -> float:
        return math.fsum(self.h2[1:])


def _check_pair(mpA: LayeredMP, mpB: LayeredMP) -> None:
    if not mpA.same_graph(mpB):
        raise MPStructureError("processes do not share the state graph and start state")


def _geometric(mpA: LayeredMP, mpB: LayeredMP, l: int) -> np.ndarray:
    return np.sqrt(mpA.augmented(l) * mpB.augmented(l))


def _sqdiff_pass(mpA: LayeredMP, mpB: LayeredMP, aB: list[np.ndarray]) -> list[np.ndarray]:
    """``D[l][s] = sum over prefixes ending at s of (sqrt p_A - sqrt p_B)^2``, cemetery first.

    Extending a prefix by an edge with probabilities ``(a, b)`` gives
    ``sqrt(a p) - sqrt(b q) = sqrt(a) (sqrt p - sqrt q) + (sqrt a - sqrt b) sqrt q``,
    so ``D`` propagates together with ``E = sum (sqrt p - sqrt q) sqrt q``.
    Every term is a product of small differences, which keeps ``H`` accurate
    near zero where ``1 - BC`` would only resolve about 1e-8.
    """
    L = mpA.L
    D = [np.empty(0)] * (L + 1)
    E = np.zeros(1 + mpA.width(L))
    D[L] = np.zeros_like(E)
    for l in range(L, 0, -1):
        TA, TB = mpA.augmented(l), mpB.augmented(l)
        sa, sb = np.sqrt(TA), np.sqrt(TB)
        den = sa + sb
        dd = np.divide(TA - TB, den, out=np.zeros_like(den), where=den > 0)  # sqrt a - sqrt b
        d_terms = np.stack([TA * D[l][:, None], 2 * sa * dd * E[:, None],
                            dd * dd * aB[l][:, None]])
        e_terms = np.stack([sa * sb * E[:, None], dd * sb * aB[l][:, None]])
        n = TA.shape[1]
        D[l - 1] = np.array([math.fsum(d_terms[:, :, j].ravel()) for j in range(n)])
        E = np.array([math.fsum(e_terms[:, :, j].ravel()) for j in range(n)])
    return D


def hellinger_backward(mpA: LayeredMP, mpB: LayeredMP) -> HellingerResult:
    _check_pair(mpA, mpB)
    L = mpA.L
    beta: list[np.ndarray] = [np.empty(0)] * (L + 1)
    beta[L] = _start_vector(mpA)
    for l in range(L, 0, -1):
        beta[l - 1] = _fsum_vecmat(beta[l], _geometric(mpA, mpB, l))
    bc = np.array([math.fsum(b) for b in beta])
    bc = np.minimum(bc, 1.0)
    aA, aB = marginal_pass(mpA), marginal_pass(mpB)
    D = _sqdiff_pass(mpA, mpB, aB)
    h = np.sqrt(np.maximum([0.5 * math.fsum(d) for d in D], 0.0))
    mean = 0.5 * (aA[0] + aB[0])
    h2 = 0.5 * D[0]
    h2_marg = 0.5 * (np.sqrt(aA[0]) - np.sqrt(aB[0])) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(mean > 0, h2 / mean, 0.0)
    return HellingerResult(
        labels0=mpA.labels[0], bc=bc, h=h, beta=beta, alpha_A=aA, alpha_B=aB,
        h2=h2, h2_marg=h2_marg, frac=frac,
        Z_A=1.0 - float(aA[0][0]), Z_B=1.0 - float(aB[0][0]),
    )


@dataclass
class ForwardPassResult:
    gamma: list[np.ndarray]  # gamma[l] with cemetery at index 0
    bc0: float

    def cross_check(self, beta: Sequence[np.ndarray]) -> np.ndarray:
        """``sum_s beta^(l)(s) gamma^(l)(s)`` for every layer; constant in l."""
        return np.array([math.fsum(b * g) for b, g in zip(beta, self.gamma)])


def hellinger_forward(mpA: LayeredMP, mpB: LayeredMP) -> ForwardPassResult:
    _check_pair(mpA, mpB)
    L = mpA.L
    gamma: list[np.ndarray] = [np.ones(1 + mpA.width(0))]
    for l in range(1, L + 1):
        g = _fsum_matvec(_geometric(mpA, mpB, l), gamma[l - 1])
        g[0] = 1.0
        gamma.append(g)
    return ForwardPassResult(gamma=gamma, bc0=float(gamma[L][1 + mpA.start]))


# ---------------------------------------------------------------------------
# conditioning on survival


@dataclass
class ConditionedResult:
    h_surv: float  # from the Doob-conditioned kernels
    h_surv_posthoc: float  # from 1 - BC_ord / sqrt(Z_A Z_B)
    h2_surv: np.ndarray  # per ordinary terminal
    labels0: tuple[Hashable, ...]
    Z_A: float
    Z_B: float
    bc_ord: float
    mp_A: LayeredMP
    mp_B: LayeredMP


def survival(mp: LayeredMP) -> list[np.ndarray]:
    """``h[l][s] = P(reach an ordinary input state | v_l = s)``, cemetery first (always 0)."""
    h = [np.concatenate([[0.0], np.ones(mp.width(0))])]
    for l in range(1, mp.L + 1):
        h.append(_fsum_matvec(mp.augmented(l), h[l - 1]))
        h[l][0] = 0.0
    return h


def condition_on_survival(mp: LayeredMP, name: str = "") -> LayeredMP:
    """Doob h-transform of ``mp`` onto trajectories that reach an ordinary input state.

    Rows of states that cannot survive are never visited under the conditioned
    law; they are kept as point masses on the cemetery so the state graph
    stays shared with the unconditioned process.
    """
    h = survival(mp)
    if h[mp.L][1 + mp.start] <= 0:
        raise NoSurvivalError(f"model {name or '?'} has no surviving mass (Z = 0)")
    kernels = []
    for l in range(1, mp.L + 1):
        T = mp.kernels[l - 1]
        K = np.zeros_like(T)
        hs = h[l][1:]
        alive = hs > 0
        K[alive, 1:] = T[alive, 1:] * h[l - 1][None, 1:] / hs[alive, None]
        # renormalise away the last-ulp drift of the division
        K[alive, 1:] /= K[alive, 1:].sum(axis=1, keepdims=True)
        K[~alive, 0] = 1.0
        kernels.append(K)
    return LayeredMP(mp.labels, kernels, mp.start, mp.discounts)


def conditioned_survival(mpA: LayeredMP, mpB: LayeredMP, *, check_tol: float = 1e-9
                         ) -> ConditionedResult:
    _check_pair(mpA, mpB)
    cA, cB = condition_on_survival(mpA, "A"), condition_on_survival(mpB, "B")
    plain = hellinger_backward(mpA, mpB)
    cond = hellinger_backward(cA, cB)
    bc_ord = plain.bc_ord
    ratio = bc_ord / math.sqrt(plain.Z_A * plain.Z_B)
    h_post = math.sqrt(max(1.0 - ratio, 0.0))
    if abs(cond.H2 - (1.0 - ratio)) > check_tol:
        raise ArithmeticError(
            f"conditioned kernels and post-hoc ratio disagree: {cond.H2!r} vs {1.0 - ratio!r}")
    return ConditionedResult(
        h_surv=cond.H, h_surv_posthoc=h_post, h2_surv=cond.h2[1:], labels0=mpA.labels[0],
        Z_A=plain.Z_A, Z_B=plain.Z_B, bc_ord=bc_ord, mp_A=cA, mp_B=cB,
    )


def aggregate_tags(labels: Sequence[Hashable], values: np.ndarray) -> dict[Hashable, float]:
    """Sum per-terminal values over the trailing tag of each label (player or stream)."""
    out: dict[Hashable, float] = {}
    for lab, v in zip(labels, values):
        key = lab[:-1] if isinstance(lab, tuple) and len(lab) >= 2 else lab
        out[key] = out.get(key, 0.0) + float(v)
    return out


# ---------------------------------------------------------------------------
# permutation-invariant distance


def _neuron_structure(labels: Sequence[Hashable]):
    """Split labels into (group, neuron id, tag); non-tuple labels are their own neuron."""
    parts = []
    for lab in labels:
        if isinstance(lab, tuple) and len(lab) >= 3:
            parts.append((lab[:-2], lab[-2], lab[-1]))
        else:
            parts.append(((), lab, None))
    return parts


def _layer_candidates(labels: Sequence[Hashable], limit: int, l: int) -> list[np.ndarray]:
    parts = _neuron_structure(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    groups: dict[Any, list] = {}
    for g, nid, _ in parts:
        ids = groups.setdefault(g, [])
        if nid not in ids:
            ids.append(nid)
    for g, ids in groups.items():
        if len(ids) > limit:
            raise ValueError(f"layer {l} has {len(ids)} neurons in one group; limit is {limit}")
    keys = list(groups)
    cands = []
    for choice in itertools.product(*(itertools.permutations(groups[g]) for g in keys)):
        remap = {}
        for g, perm in zip(keys, choice):
            remap.update({(g, a): b for a, b in zip(groups[g], perm)})
        P = np.empty(len(labels), dtype=int)
        ok = True
        for k, (g, nid, tag) in enumerate(parts):
            new = remap[(g, nid)]
            lab = labels[k]
            target = (*g, new, tag) if isinstance(lab, tuple) and len(lab) >= 3 else new
            j = index.get(target)
            if j is None:
                ok = False
                break
            P[k] = j
        if ok:
            cands.append(P)
    return cands


def apply_permutation(mp: LayeredMP, perms: dict[int, np.ndarray]) -> LayeredMP:
    """State ``i`` of layer ``l`` in the result is state ``perms[l][i]`` of ``mp``."""
    def full(l):
        return perms.get(l, np.arange(mp.width(l)))

    kernels = []
    discounts = [] if mp.discounts is not None else None
    for l in range(1, mp.L + 1):
        rows, cols = full(l), np.concatenate([[0], 1 + full(l - 1)])
        kernels.append(mp.kernels[l - 1][rows][:, cols])
        if discounts is not None:
            discounts.append(mp.discounts[l - 1][rows][:, cols])
    start = int(np.flatnonzero(full(mp.L) == mp.start)[0])
    return LayeredMP(mp.labels, kernels, start, discounts)


@dataclass
class PermResult:
    h_perm: float
    h_identity: float
    perms: dict[int, np.ndarray]
    n_candidates: int


def perm_invariant_hellinger(mpA: LayeredMP, mpB: LayeredMP, max_states_per_layer: int = 6
                             ) -> PermResult:
    """Minimise H(A, P(B)) over neuron permutations of the hidden layers 1..L-1.

    Tags (player, stream) are carried along with their neuron; input and
    output layers stay fixed.  Exhaustive, so only for small widths.
    """
    _check_pair(mpA, mpB)
    L = mpA.L
    hidden = list(range(1, L))
    cands = {l: _layer_candidates(mpA.labels[l], max_states_per_layer, l) for l in hidden}
    EA = [None] + [mpA.augmented(l) for l in range(1, L + 1)]
    EB = [None] + [mpB.augmented(l) for l in range(1, L + 1)]

    def idx(l, P):
        return np.concatenate([[0], 1 + P]) if P is not None else slice(None)

    best_bc, best = -1.0, None
    count = 0
    for choice in itertools.product(*(cands[l] for l in hidden)):
        P = dict(zip(hidden, choice))
        g = np.ones(1 + mpA.width(0))
        for l in range(1, L + 1):
            r, c = idx(l, P.get(l)), idx(l - 1, P.get(l - 1))
            g = np.sqrt(EA[l] * EB[l][r][:, c]) @ g
            g[0] = 1.0
        bc = g[1 + mpA.start]
        count += 1
        if bc > best_bc + 1e-15:
            best_bc, best = bc, P
    identity = hellinger_backward(mpA, mpB)
    if best is None:
        best = {}
    res = hellinger_backward(mpA, apply_permutation(mpB, best))
    return PermResult(h_perm=min(res.H, identity.H), h_identity=identity.H,
                      perms=best if res.H <= identity.H else {}, n_candidates=count)
