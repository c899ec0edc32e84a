"""Single-head toy attention: forward pass, QK oracle and Value-routing relevance.

The softmax rows ``A`` are detached: relevance flows only through the Value
path ``V = X W_V`` and the mixing ``O = A V``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .net_core import Attention, attention_forward

__all__ = [
    "AttentionBlock",
    "AttnRelevance",
    "attn_forward",
    "attn_logits",
    "qk_oracle",
    "value_streams",
    "attn_lrp",
    "composite_lrp",
    "value_policy",
    "value_routing_objective",
]


@dataclass(frozen=True, eq=False)
class AttentionBlock:
    WQ: np.ndarray
    WK: np.ndarray
    WV: np.ndarray
    X: np.ndarray  # (tokens, D)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "X", X)
        for name in ("WQ", "WK", "WV"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim != 2 or M.shape[0] != X.shape[1]:
                raise ValueError(f"{name} must have shape ({X.shape[1]}, d_h), got {M.shape}")
            object.__setattr__(self, name, M)
        if not self.WQ.shape == self.WK.shape == self.WV.shape:
            raise ValueError("WQ, WK and WV must share the shape (D, d_h)")

    @property
    def tokens(self) -> int:
        return self.X.shape[0]

    @property
    def d_h(self) -> int:
        return self.WQ.shape[1]

    @classmethod
    def from_layer(cls, layer: Attention, x_flat: np.ndarray) -> "AttentionBlock":
        return cls(layer.WQ, layer.WK, layer.WV,
                   np.asarray(x_flat, dtype=float).reshape(layer.tokens, layer.model_dim))

    def as_layer(self) -> Attention:
        return Attention(self.WQ, self.WK, self.WV, d_h=self.d_h, tokens=self.tokens)


@dataclass
class AttnRelevance:
    R_O: np.ndarray
    R_V: np.ndarray
    R_X: np.ndarray
    Z_plus: np.ndarray
    Z_minus: np.ndarray


def attn_forward(blk: AttentionBlock) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cache = attention_forward(blk.as_layer(), blk.X.reshape(-1))
    return cache["A"], cache["V"], cache["O"]


def attn_logits(blk: AttentionBlock) -> np.ndarray:
    return (blk.X @ blk.WQ) @ (blk.X @ blk.WK).T / math.sqrt(blk.d_h)


def qk_oracle(blk: AttentionBlock, lambda_sm: float = 0.0, s: np.ndarray | None = None
              ) -> np.ndarray:
    """Softmax of ``e_qk + lambda_sm * s_k``: the reference policy for Value routing."""
    if lambda_sm > 0:
        raise ValueError("lambda_sm must be non-positive")
    e = attn_logits(blk)
    if lambda_sm != 0:
        s = np.asarray(s, dtype=float)
        if s.shape != (blk.tokens,) or np.any(s < 0):
            raise ValueError("s must be a non-negative per-key vector")
        e = e + lambda_sm * s[None, :]
    e = e - e.max(axis=1, keepdims=True)
    A = np.exp(e)
    return A / A.sum(axis=1, keepdims=True)


def value_streams(blk: AttentionBlock) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-contribution products ``[X_ke W_ed]^+/-`` (k, e, d) and their sums over e."""
    P = blk.X[:, :, None] * blk.WV[None, :, :]
    Pp, Pm = np.maximum(P, 0.0), np.maximum(-P, 0.0)
    return Pp, Pm, Pp.sum(axis=1), Pm.sum(axis=1)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def attn_lrp(blk: AttentionBlock, R_O: np.ndarray, alpha: float, beta: float,
             oracle_A: np.ndarray | None = None) -> AttnRelevance:
    """Value-routing alpha-beta relevance; a stream with ``Z = 0`` contributes nothing."""
    A = attn_forward(blk)[0] if oracle_A is None else np.asarray(oracle_A, dtype=float)
    R_O = np.asarray(R_O, dtype=float).reshape(blk.tokens, blk.d_h)
    Pp, Pm, vp, vm = value_streams(blk)
    Zp, Zm = A @ vp, A @ vm  # (q, d)
    Gp = alpha * _safe_div(R_O, Zp)  # relevance per unit of + mass at (q, d)
    Gm = beta * _safe_div(R_O, Zm)
    Hp, Hm = A.T @ Gp, A.T @ Gm  # (k, d)
    R_V = Hp * vp - Hm * vm
    R_X = np.einsum("ked,kd->ke", Pp, Hp) - np.einsum("ked,kd->ke", Pm, Hm)
    return AttnRelevance(R_O, R_V, R_X, Zp, Zm)


def composite_lrp(blk: AttentionBlock, R_O: np.ndarray, alpha: float, beta: float,
                  oracle_A: np.ndarray | None = None) -> np.ndarray:
    """Plain alpha-beta rule on the flattened map ``W_eff[(k,e),(q,d)] = A_qk W_ed``."""
    A = attn_forward(blk)[0] if oracle_A is None else np.asarray(oracle_A, dtype=float)
    S, D = blk.X.shape
    dh = blk.d_h
    R_O = np.asarray(R_O, dtype=float).reshape(-1)
    x = blk.X.reshape(-1)
    R_X = np.zeros(S * D)
    for q in range(S):
        for d in range(dh):
            w = np.array([A[q, k] * blk.WV[e, d] for k in range(S) for e in range(D)])
            s = x * w
            sp, sm = np.maximum(s, 0.0), np.maximum(-s, 0.0)
            r = R_O[q * dh + d]
            if sp.sum() > 0:
                R_X += alpha * sp / sp.sum() * r
            if sm.sum() > 0:
                R_X -= beta * sm / sm.sum() * r
    return R_X.reshape(S, D)


def value_policy(A_row: np.ndarray, v_row: np.ndarray) -> np.ndarray:
    """Optimal Value-routing row ``A_k v_k / Z`` for one stream at one (q, d)."""
    w = np.asarray(A_row, dtype=float) * np.asarray(v_row, dtype=float)
    return w / w.sum()


def value_routing_objective(pi: np.ndarray, A_row: np.ndarray, v_row: np.ndarray) -> float:
    """``E_pi[log v] - KL(pi || A)``, maximised by ``value_policy`` with value ``log Z``."""
    pi = np.asarray(pi, dtype=float)
    A_row = np.asarray(A_row, dtype=float)
    v_row = np.asarray(v_row, dtype=float)
    on = pi > 0
    if np.any(on & ((v_row <= 0) | (A_row <= 0))):
        return -math.inf
    return float(np.sum(pi[on] * (np.log(v_row[on]) - np.log(pi[on] / A_row[on]))))
