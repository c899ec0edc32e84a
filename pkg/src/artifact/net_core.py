"""Network representation, forward pass and activation-pair decompositions.

A network is a list of nodes.  Node 0 is the input; node ``l`` (``1..L``) is
``layers[l - 1]``.  Dense, max-pool and attention nodes read from the node
directly below them, residual adds read from two arbitrary earlier nodes.
The scalar output is ``a[L][output_neuron]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import jsonschema
import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Activation",
    "Dense",
    "ResidualAdd",
    "MaxPool",
    "Attention",
    "NetSpec",
    "NetSpecError",
    "NET_SCHEMA",
    "net_from_json",
    "ForwardResult",
    "Stopping",
    "Mixing",
    "Softplus",
    "Probit",
    "DecompState",
    "forward",
    "decompose_forward",
    "mixing_convexity_probe",
    "random_net",
    "softplus",
    "binary_entropy",
]


class NetSpecError(ValueError):
    """Structural problem with a network description.

    ``path`` is a JSON pointer into the serialised form when one applies.
    """

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Activation:
    kind: str  # "relu" | "softplus" | "gelu"
    theta: float | None = None

    def __post_init__(self):
        if self.kind not in ("relu", "softplus", "gelu"):
            raise NetSpecError(f"unknown activation {self.kind!r}")
        if self.kind == "softplus" and not (self.theta is not None and self.theta > 0):
            raise NetSpecError("softplus temperature must be positive")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.where(z > 0, z, 0.0)
        if self.kind == "softplus":
            return softplus(z, self.theta)
        return z * ndtr(z)

    def to_json(self) -> Any:
        if self.kind == "softplus":
            return {"softplus": self.theta}
        return self.kind


RELU = Activation("relu")


@dataclass(frozen=True, eq=False)
class Dense:
    W: np.ndarray
    b: np.ndarray
    activation: Activation = RELU


@dataclass(frozen=True)
class ResidualAdd:
    left: int
    right: int


@dataclass(frozen=True)
class MaxPool:
    groups: tuple[tuple[int, ...], ...]


@dataclass(frozen=True, eq=False)
class Attention:
    WQ: np.ndarray
    WK: np.ndarray
    WV: np.ndarray
    d_h: int
    tokens: int

    @property
    def model_dim(self) -> int:
        return self.WQ.shape[0]


Layer = Union[Dense, ResidualAdd, MaxPool, Attention]


@dataclass(frozen=True, eq=False)
class NetSpec:
    input_dim: int
    output_neuron: int
    layers: tuple[Layer, ...]
    widths: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "widths", _check_structure(self))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def node(self, l: int) -> Layer:
        return self.layers[l - 1]

    def to_json(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"kind": "dense", "W": layer.W.tolist(), "b": layer.b.tolist(),
                            "activation": layer.activation.to_json()})
            elif isinstance(layer, ResidualAdd):
                out.append({"kind": "residual_add", "left": layer.left, "right": layer.right})
            elif isinstance(layer, MaxPool):
                out.append({"kind": "max_pool", "groups": [list(g) for g in layer.groups]})
            else:
                out.append({"kind": "attention", "WQ": layer.WQ.tolist(), "WK": layer.WK.tolist(),
                            "WV": layer.WV.tolist(), "d_h": layer.d_h, "tokens": layer.tokens})
        return {"input_dim": self.input_dim, "output_neuron": self.output_neuron, "layers": out}

    def topology(self) -> tuple:
        """Hashable shape-only signature; two nets with equal topology share game state graphs."""
        sig = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                sig.append(("dense", layer.W.shape))
            elif isinstance(layer, ResidualAdd):
                sig.append(("add", layer.left, layer.right))
            elif isinstance(layer, MaxPool):
                sig.append(("max", layer.groups))
            else:
                sig.append(("attn", layer.WQ.shape, layer.d_h, layer.tokens))
        return (self.input_dim, self.output_neuron, tuple(sig))

    @classmethod
    def from_json(cls, doc: Any) -> "NetSpec":
        """Validate ``doc`` against ``NET_SCHEMA`` and build the net; errors carry a JSON pointer."""
        return net_from_json(doc)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetSpec):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.topology())


def _check_structure(net: NetSpec) -> tuple[int, ...]:
    if net.input_dim < 1:
        raise NetSpecError("input_dim must be positive", "/input_dim")
    if not net.layers:
        raise NetSpecError("at least one layer is required", "/layers")
    widths = [net.input_dim]
    n_attn = 0
    for l, layer in enumerate(net.layers, start=1):
        path = f"/layers/{l - 1}"
        below = widths[l - 1]
        if isinstance(layer, Dense):
            if layer.W.ndim != 2 or layer.W.shape[1] != below:
                raise NetSpecError(f"W must have shape (out, {below}), got {layer.W.shape}", path + "/W")
            if layer.b.shape != (layer.W.shape[0],):
                raise NetSpecError(f"b must have length {layer.W.shape[0]}", path + "/b")
            if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.b))):
                raise NetSpecError("non-finite parameter", path)
            widths.append(layer.W.shape[0])
        elif isinstance(layer, ResidualAdd):
            for name, ref in (("left", layer.left), ("right", layer.right)):
                if not 0 <= ref < l:
                    raise NetSpecError(f"must reference an earlier node in [0, {l - 1}]", f"{path}/{name}")
            if widths[layer.left] != widths[layer.right]:
                raise NetSpecError("operands have different widths", path)
            widths.append(widths[layer.left])
        elif isinstance(layer, MaxPool):
            flat = sorted(i for g in layer.groups for i in g)
            if flat != list(range(below)) or any(len(g) == 0 for g in layer.groups):
                raise NetSpecError(f"groups must partition range({below})", path + "/groups")
            widths.append(len(layer.groups))
        elif isinstance(layer, Attention):
            n_attn += 1
            D = layer.WQ.shape[0]
            for name in ("WQ", "WK", "WV"):
                M = getattr(layer, name)
                if M.shape != (D, layer.d_h) or not np.all(np.isfinite(M)):
                    raise NetSpecError(f"must be a finite ({D}, {layer.d_h}) matrix", f"{path}/{name}")
            if layer.d_h < 1 or layer.tokens < 1 or layer.tokens * D != below:
                raise NetSpecError(f"tokens * model_dim must equal the width below ({below})", path)
            widths.append(layer.tokens * layer.d_h)
        else:
            raise NetSpecError(f"unknown layer type {type(layer).__name__}", path)
    if n_attn > 1:
        raise NetSpecError("at most one attention block is supported", "/layers")
    if not 0 <= net.output_neuron < widths[-1]:
        raise NetSpecError(f"must index the last node (width {widths[-1]})", "/output_neuron")
    return tuple(widths)


_MATRIX = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_INDEX = {"type": "integer", "minimum": 0}

NET_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["input_dim", "output_neuron", "layers"],
    "additionalProperties": False,
    "properties": {
        "input_dim": {"type": "integer", "minimum": 1},
        "output_neuron": _INDEX,
        "layers": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/layer"}},
    },
    "$defs": {
        "activation": {"oneOf": [
            {"enum": ["relu", "gelu"]},
            {"type": "object", "required": ["softplus"], "additionalProperties": False,
             "properties": {"softplus": {"type": "number", "exclusiveMinimum": 0}}},
        ]},
        "layer": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["dense", "residual_add", "max_pool", "attention"]}},
            "allOf": [
                {"if": {"properties": {"kind": {"const": "dense"}}},
                 "then": {"required": ["W", "b", "activation"], "additionalProperties": False,
                          "properties": {"kind": True, "W": _MATRIX,
                                         "b": {"type": "array", "items": {"type": "number"}},
                                         "activation": {"$ref": "#/$defs/activation"}}}},
                {"if": {"properties": {"kind": {"const": "residual_add"}}},
                 "then": {"required": ["left", "right"], "additionalProperties": False,
                          "properties": {"kind": True, "left": _INDEX, "right": _INDEX}}},
                {"if": {"properties": {"kind": {"const": "max_pool"}}},
                 "then": {"required": ["groups"], "additionalProperties": False,
                          "properties": {"kind": True, "groups": {
                              "type": "array", "minItems": 1,
                              "items": {"type": "array", "minItems": 1, "items": _INDEX}}}}},
                {"if": {"properties": {"kind": {"const": "attention"}}},
                 "then": {"required": ["WQ", "WK", "WV", "d_h", "tokens"],
                          "additionalProperties": False,
                          "properties": {"kind": True, "WQ": _MATRIX, "WK": _MATRIX, "WV": _MATRIX,
                                         "d_h": {"type": "integer", "minimum": 1},
                                         "tokens": {"type": "integer", "minimum": 1}}}},
            ],
        },
    },
}


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def _schema_error(err: jsonschema.ValidationError) -> NetSpecError:
    parts = list(err.absolute_path)
    if err.validator == "required":
        # name the missing property itself, e.g. /layers/0/W
        missing = next((r for r in err.validator_value if r not in err.instance), None)
        if missing is not None:
            parts.append(missing)
    return NetSpecError(err.message, _pointer(parts) or "/")


def net_from_json(doc: Any) -> NetSpec:
    """Build a ``NetSpec`` from its JSON form, raising ``NetSpecError`` with a JSON pointer."""
    validator = jsonschema.Draft202012Validator(NET_SCHEMA)
    errors = list(validator.iter_errors(doc))
    if errors:
        raise _schema_error(jsonschema.exceptions.best_match(errors))
    layers: list[Layer] = []
    for k, lay in enumerate(doc["layers"]):
        kind = lay["kind"]
        if kind == "dense":
            act = lay["activation"]
            act = Activation("softplus", float(act["softplus"])) if isinstance(act, dict) else Activation(act)
            W = np.asarray(lay["W"], dtype=float)
            if W.ndim != 2:
                raise NetSpecError("rows must have equal length", f"/layers/{k}/W")
            layers.append(Dense(W, np.asarray(lay["b"], dtype=float).reshape(-1), act))
        elif kind == "residual_add":
            layers.append(ResidualAdd(int(lay["left"]), int(lay["right"])))
        elif kind == "max_pool":
            layers.append(MaxPool(tuple(tuple(int(i) for i in g) for g in lay["groups"])))
        else:
            mats = []
            for name in ("WQ", "WK", "WV"):
                M = np.asarray(lay[name], dtype=float)
                if M.ndim != 2:
                    raise NetSpecError("rows must have equal length", f"/layers/{k}/{name}")
                mats.append(M)
            layers.append(Attention(*mats, d_h=int(lay["d_h"]), tokens=int(lay["tokens"])))
    return NetSpec(int(doc["input_dim"]), int(doc["output_neuron"]), tuple(layers))


# ---------------------------------------------------------------------------
# scalar helpers


def softplus(z: np.ndarray, theta: float) -> np.ndarray:
    return theta * np.logaddexp(0.0, np.asarray(z, dtype=float) / theta)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of a Bernoulli(p), with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0) - np.where(q > 0, q * np.log(q), 0.0)
    return h


def _pos(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def _neg(a: np.ndarray) -> np.ndarray:
    return np.maximum(-a, 0.0)


def argmax_first(values: np.ndarray) -> int:
    """Index of the maximum; ties go to the smallest index."""
    return int(np.argmax(values))  # numpy already returns the first maximiser


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    a: list[np.ndarray]
    z: list[np.ndarray | None]
    winners: dict[int, np.ndarray]
    attention: dict[int, dict[str, np.ndarray]]
    output: float


def attention_forward(layer: Attention, x_flat: np.ndarray) -> dict[str, np.ndarray]:
    X = x_flat.reshape(layer.tokens, layer.model_dim)
    Q = X @ layer.WQ
    K = X @ layer.WK
    V = X @ layer.WV
    e = Q @ K.T / math.sqrt(layer.d_h)
    e = e - e.max(axis=1, keepdims=True)
    A = np.exp(e)
    A /= A.sum(axis=1, keepdims=True)
    return {"X": X, "Q": Q, "K": K, "V": V, "A": A, "O": A @ V}


def forward(net: NetSpec, x: Sequence[float]) -> ForwardResult:
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise NetSpecError(f"input must have length {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NetSpecError("input contains non-finite values")
    a: list[np.ndarray] = [x]
    zs: list[np.ndarray | None] = [None]
    winners: dict[int, np.ndarray] = {}
    attn: dict[int, dict[str, np.ndarray]] = {}
    for l, layer in enumerate(net.layers, start=1):
        z = None
        if isinstance(layer, Dense):
            z = layer.W @ a[l - 1] + layer.b
            out = layer.activation(z)
        elif isinstance(layer, ResidualAdd):
            out = a[layer.left] + a[layer.right]
        elif isinstance(layer, MaxPool):
            idx = np.array([g[argmax_first(a[l - 1][list(g)])] for g in layer.groups], dtype=int)
            winners[l] = idx
            out = a[l - 1][idx]
        else:
            cache = attention_forward(layer, a[l - 1])
            attn[l] = cache
            out = cache["O"].reshape(-1)
        a.append(out)
        zs.append(z)
    return ForwardResult(a, zs, winners, attn, float(a[-1][net.output_neuron]))


# ---------------------------------------------------------------------------
# decompositions


@dataclass(frozen=True)
class Stopping:
    pass


@dataclass(frozen=True)
class Mixing:
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "eta", min(max(float(self.eta), 0.0), 1.0))


@dataclass(frozen=True)
class Softplus:
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("softplus temperature must be positive")


@dataclass(frozen=True)
class Probit:
    """Gaussian-gate pair (Phi(z) z+, Phi(z) z-), whose difference is GELU."""


DecompKind = Union[Stopping, Mixing, Softplus, Probit]


@dataclass
class DecompState:
    a_plus: list[np.ndarray]
    a_minus: list[np.ndarray]
    z_plus: list[np.ndarray | None]
    z_minus: list[np.ndarray | None]

    def difference(self, l: int) -> np.ndarray:
        return self.a_plus[l] - self.a_minus[l]


def _required_activation(kind: DecompKind) -> Activation:
    if isinstance(kind, (Stopping, Mixing)):
        return RELU
    if isinstance(kind, Softplus):
        return Activation("softplus", kind.theta)
    return Activation("gelu")


def split_linear(W: np.ndarray, b: np.ndarray | None, ap: np.ndarray, am: np.ndarray):
    """Canonical non-negative linear map on activation pairs."""
    Wp, Wm = _pos(W), _neg(W)
    zp = Wp @ ap + Wm @ am
    zm = Wp @ am + Wm @ ap
    if b is not None:
        zp = zp + _pos(b)
        zm = zm + _neg(b)
    return zp, zm


def decompose_forward(net: NetSpec, x: Sequence[float], kind: DecompKind) -> DecompState:
    fwd = forward(net, x)
    need = _required_activation(kind)
    x = fwd.a[0]
    ap, am = [_pos(x)], [_neg(x)]
    zp_all: list[np.ndarray | None] = [None]
    zm_all: list[np.ndarray | None] = [None]
    for l, layer in enumerate(net.layers, start=1):
        zp = zm = None
        if isinstance(layer, Dense):
            if layer.activation != need:
                raise NetSpecError(
                    f"{type(kind).__name__} decomposition needs {need.kind} layers, "
                    f"got {layer.activation.kind}", f"/layers/{l - 1}/activation")
            zp, zm = split_linear(layer.W, layer.b, ap[l - 1], am[l - 1])
            z = zp - zm
            if isinstance(kind, Stopping):
                g = (z > 0).astype(float)
                p, m = g * zp, g * zm
            elif isinstance(kind, Mixing):
                eta = kind.eta
                p = eta * np.maximum(zp, zm) + (1 - eta) * zp
                m = eta * zm + (1 - eta) * np.minimum(zp, zm)
            elif isinstance(kind, Softplus):
                s = expit(z / kind.theta)
                p = s * zp + kind.theta * binary_entropy(s)
                m = s * zm
            else:
                g = ndtr(z)
                p, m = g * zp, g * zm
        elif isinstance(layer, ResidualAdd):
            p = ap[layer.left] + ap[layer.right]
            m = am[layer.left] + am[layer.right]
        elif isinstance(layer, MaxPool):
            diff = ap[l - 1] - am[l - 1]
            idx = np.array([g[argmax_first(diff[list(g)])] for g in layer.groups], dtype=int)
            p, m = ap[l - 1][idx], am[l - 1][idx]
        else:
            A = fwd.attention[l]["A"]
            S, D = layer.tokens, layer.model_dim
            Xp, Xm = ap[l - 1].reshape(S, D), am[l - 1].reshape(S, D)
            Wp, Wm = _pos(layer.WV), _neg(layer.WV)
            Vp = Xp @ Wp + Xm @ Wm
            Vm = Xp @ Wm + Xm @ Wp
            p, m = (A @ Vp).reshape(-1), (A @ Vm).reshape(-1)
        ap.append(p)
        am.append(m)
        zp_all.append(zp)
        zm_all.append(zm)
    return DecompState(ap, am, zp_all, zm_all)


def mixing_convexity_probe(net: NetSpec, x0: Sequence[float], x1: Sequence[float], t: float,
                           tol: float = 1e-10) -> bool:
    """Sample check that the eta=1 Mixing a+ is convex along the segment x0 -> x1."""
    if any(isinstance(layer, (MaxPool, Attention)) for layer in net.layers):
        raise NetSpecError("the convexity probe applies to dense/residual ReLU nets only")
    x0, x1 = np.asarray(x0, dtype=float), np.asarray(x1, dtype=float)
    kind = Mixing(1.0)
    mid = decompose_forward(net, t * x0 + (1 - t) * x1, kind)
    d0 = decompose_forward(net, x0, kind)
    d1 = decompose_forward(net, x1, kind)
    for l in range(1, net.depth + 1):
        bound = t * d0.a_plus[l] + (1 - t) * d1.a_plus[l]
        if np.any(mid.a_plus[l] > bound + tol):
            return False
    return True


# ---------------------------------------------------------------------------
# random fixtures


def random_net(rng: np.random.Generator, widths: Sequence[int], activation: Activation = RELU,
               *, skip: bool = False, maxpool: bool = False, attention: bool = False,
               tokens: int = 2, d_h: int = 2, bias_std: float = 0.1,
               output_neuron: int = 0) -> NetSpec:
    """He-initialised random net with optional residual, max-pool and attention nodes.

    ``widths`` lists input, hidden and output widths of the dense backbone.
    The optional nodes are inserted after the first hidden layer.
    """
    widths = list(widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("need at least an input and an output width, all positive")
    layers: list[Layer] = []
    cur = widths[0]

    def dense(n_out: int, act: Activation) -> None:
        nonlocal cur
        W = rng.normal(0.0, math.sqrt(2.0 / cur), size=(n_out, cur))
        b = rng.normal(0.0, bias_std, size=n_out) if bias_std > 0 else np.zeros(n_out)
        layers.append(Dense(W, b, act))
        cur = n_out

    for k, n in enumerate(widths[1:], start=1):
        dense(n, activation)
        if k != 1 or k == len(widths) - 1:
            continue
        if skip:
            anchor = len(layers)
            dense(cur, activation)
            layers.append(ResidualAdd(len(layers), anchor))
        if attention:
            if cur % tokens:
                raise ValueError(f"hidden width {cur} is not divisible by tokens={tokens}")
            D = cur // tokens
            Ws = [rng.normal(0.0, 1.0 / math.sqrt(D), size=(D, d_h)) for _ in range(3)]
            layers.append(Attention(*Ws, d_h=d_h, tokens=tokens))
            cur = tokens * d_h
        if maxpool and cur >= 2:
            groups = tuple(tuple(range(i, min(i + 2, cur))) for i in range(0, cur, 2))
            layers.append(MaxPool(groups))
            cur = len(groups)
    return NetSpec(widths[0], output_neuron, tuple(layers))
