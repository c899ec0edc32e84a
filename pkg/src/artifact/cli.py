"""Command-line entry point: ``artifact {attribute,hellinger,sweep,check,gen-net}``.

Exit codes: 0 ok, 1 property failure, 2 schema error, 3 config violation,
4 topology mismatch.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checks import SUITES, run_checks
from .net_core import (Activation, Attention, NetSpec, NetSpecError, forward, net_from_json,
                       random_net)
from .rand_harness import SweepResult, game_mp, input_noise_sweep, randomization_sweep
from .routing_game import RGConfig, rg_attribution
from .stopping_game import build_sg_auto, node_differences, sg_occupation
from .trajectory_mp import (CEMETERY, NoSurvivalError, conditioned_survival, hellinger_backward,
                            label_key, perm_invariant_hellinger)

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_CONFIG, EXIT_TOPOLOGY = 0, 1, 2, 3, 4


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# serialisation


def _num(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    return "%.17g" % v


def dumps(obj: Any, indent: int = 0) -> str:
    """JSON with every float printed to 17 significant digits; NaN and inf become null."""
    pad, inner = " " * indent, " " * (indent + 2)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {dumps(v, indent + 2)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
               for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 2) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _manifest(args: argparse.Namespace, **extra: Any) -> dict:
    skip = {"func", "command"}
    opts = {k.replace("_", "-"): v.to_json() if isinstance(v, Activation) else v
            for k, v in sorted(vars(args).items()) if k not in skip}
    return {"command": args.command, "options": opts, **extra}


# ---------------------------------------------------------------------------
# loading


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CLIError(f"{path}: {e.strerror}", EXIT_SCHEMA) from e
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})", EXIT_SCHEMA) from e


def load_net(path: str) -> NetSpec:
    try:
        return net_from_json(_read_json(path))
    except NetSpecError as e:
        raise CLIError(f"{path}: {e}", EXIT_SCHEMA) from e


def load_input(path: str, net: NetSpec) -> np.ndarray:
    """A bare JSON array or an object with key ``"x"``."""
    doc = _read_json(path)
    where = "/x" if isinstance(doc, dict) else ""
    x = doc.get("x") if isinstance(doc, dict) else doc
    if not isinstance(x, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                          for v in x):
        raise CLIError(f"{path}: {where or '/'}: expected an array of numbers", EXIT_SCHEMA)
    if len(x) != net.input_dim:
        raise CLIError(f"{path}: {where or '/'}: expected {net.input_dim} entries, got {len(x)}",
                       EXIT_SCHEMA)
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise CLIError(f"{path}: {where or '/'}: non-finite entry", EXIT_SCHEMA)
    return arr


def load_inputs(path: str, net: NetSpec) -> list[np.ndarray]:
    """Every ``*.json`` in a directory (sorted by name), or a file holding a list of inputs."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise CLIError(f"{path}: no *.json inputs", EXIT_SCHEMA)
        return [load_input(str(f), net) for f in files]
    doc = _read_json(path)
    if isinstance(doc, list) and doc and all(isinstance(v, list) for v in doc):
        out = []
        for k, v in enumerate(doc):
            arr = np.asarray(v, dtype=float)
            if arr.shape != (net.input_dim,) or not np.all(np.isfinite(arr)):
                raise CLIError(f"{path}: /{k}: expected {net.input_dim} finite numbers",
                               EXIT_SCHEMA)
            out.append(arr)
        return out
    return [load_input(path, net)]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def rg_config(args: argparse.Namespace) -> RGConfig:
    try:
        return RGConfig(alpha=args.alpha, beta=args.beta, epsilon=args.eps, tau=args.tau,
                        lam=args.lam, sigma2=args.sigma2, lambda_sm=args.lambda_sm,
                        lambda_ent=args.lambda_ent, gate=args.gate)
    except ValueError as e:
        raise CLIError(f"config: {e}", EXIT_CONFIG) from e


def _require_sg(net: NetSpec, path: str) -> None:
    for l, layer in enumerate(net.layers, start=1):
        if isinstance(layer, Attention):
            raise CLIError(f"{path}: /layers/{l - 1}: the sg game does not route attention; "
                           "use --game rg", EXIT_CONFIG)


# ---------------------------------------------------------------------------
# commands


def cmd_attribute(args: argparse.Namespace) -> int:
    net = load_net(args.net)
    x = load_input(args.input, net)
    cfg = rg_config(args)
    if args.game == "sg":
        _require_sg(net, args.net)
        occ = sg_occupation(build_sg_auto(net, x))
        layers = node_differences(net, occ.mp, occ.gamma)
        result = {"f": forward(net, x).output, "input": occ.gradient,
                  "layers": [{"layer": l, "values": v} for l, v in enumerate(layers)]}
    else:
        try:
            rel, _ = rg_attribution(net, x, cfg, seed=args.seed_mass)
        except ValueError as e:
            raise CLIError(f"config: {e}", EXIT_CONFIG) from e
        layers = rel.layers
        result = {"f": forward(net, x).output, "seed_mass": rel.seed, "input": rel.input,
                  "layers": rel.to_json()}
    doc = {"manifest": _manifest(args, config=asdict(cfg) if args.game == "rg" else None),
           "result": result}
    _emit(dumps(doc) + "\n", args.output)
    if args.csv:
        lines = ["layer,index,value"]
        lines += [f"{l},{i},{_num(float(v))}" for l, vec in enumerate(layers) for i, v in enumerate(vec)]
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_hellinger(args: argparse.Namespace) -> int:
    netA, netB = load_net(args.net_a), load_net(args.net_b)
    if netA.topology() != netB.topology():
        raise CLIError("the two nets do not share a topology", EXIT_TOPOLOGY)
    x = load_input(args.input, netA)
    cfg = rg_config(args)
    if args.game == "sg":
        _require_sg(netA, args.net_a)
    game = args.game.upper()
    mpA, mpB = game_mp(game, netA, x, cfg), game_mp(game, netB, x, cfg)
    res = hellinger_backward(mpA, mpB)
    result: dict[str, Any] = {"H": res.H, "bc": res.bc, "h": res.h, "Z_A": res.Z_A, "Z_B": res.Z_B}
    cond = None
    if args.conditioned:
        try:
            cond = conditioned_survival(mpA, mpB)
            result["H_surv"] = cond.h_surv
            result["H_surv_posthoc"] = cond.h_surv_posthoc
        except NoSurvivalError as e:
            result["H_surv"] = None
            result["H_surv_note"] = str(e)
    if args.perm:
        try:
            pr = perm_invariant_hellinger(mpA, mpB)
        except ValueError as e:
            raise CLIError(f"--perm: {e}", EXIT_CONFIG) from e
        result["H_perm"] = pr.h_perm
        result["perms"] = {str(l): P for l, P in sorted(pr.perms.items())}
    doc = {"manifest": _manifest(args, config=asdict(cfg) if args.game == "rg" else None),
           "result": result}
    _emit(dumps(doc) + "\n", args.output)
    if args.per_pixel:
        head = "terminal,h2,h2_marg,frac" + (",h2_surv" if cond is not None else "")
        lines = [head]
        for k, lab in enumerate((CEMETERY, *res.labels0)):
            row = [label_key(lab), _num(res.h2[k]), _num(res.h2_marg[k]), _num(res.frac[k])]
            if cond is not None:
                row.append(_num(cond.h2_surv[k - 1]) if k > 0 else "")
            lines.append(",".join(f'"{c}"' if "," in c else c for c in row))
        Path(args.per_pixel).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.dump_mp:
        Path(args.dump_mp).write_text(dumps({"A": mpA.to_json(), "B": mpB.to_json()}) + "\n",
                                      encoding="utf-8")
    return EXIT_OK


def _pool_noise(results) -> SweepResult:
    """Average equal-sized per-input noise sweeps into one curve."""
    out = SweepResult()
    base = results[0].to_sweep()
    for k, row in enumerate(base.rows):
        merged = dict(row)
        for key in ("H", "Hsurv"):
            means = np.array([getattr(r, f"{key}_mean")[k] for r in results])
            sds = np.array([getattr(r, f"{key}_std")[k] for r in results])
            ok = np.isfinite(means)
            if not ok.any():
                merged[f"{key}_mean"], merged[f"{key}_std"] = math.nan, math.nan
                continue
            m = float(means[ok].mean())
            merged[f"{key}_mean"] = m
            merged[f"{key}_std"] = float(math.sqrt(max((sds[ok] ** 2 + means[ok] ** 2).mean() - m * m, 0.0)))
        out.rows.append(merged)
    return out


def cmd_sweep(args: argparse.Namespace) -> int:
    net = load_net(args.net)
    inputs = load_inputs(args.inputs, net)
    cfg = rg_config(args)
    games = ["SG", "RG"] if args.game == "both" else [args.game.upper()]
    has_attn = any(isinstance(layer, Attention) for layer in net.layers)
    if has_attn and games == ["SG"]:
        _require_sg(net, args.net)
    if args.mode == "cascade":
        result = randomization_sweep(net, inputs, cfg, seeds=args.seeds, games=games)
    else:
        if any(s < 0 for s in args.sigmas):
            raise CLIError("config: sigmas must be non-negative", EXIT_CONFIG)
        result = SweepResult()
        for g in games:
            if g == "SG" and has_attn:
                continue
            per_input = [input_noise_sweep(net, x, args.sigmas, cfg, seed=args.seeds[0],
                                           draws=args.draws, game=g) for x in inputs]
            result.rows += _pool_noise(per_input).rows
    _emit(result.to_csv(), args.output)
    if args.output:
        manifest = _manifest(args, n_inputs=len(inputs), config=asdict(cfg))
        Path(args.output + ".manifest.json").write_text(dumps(manifest) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    merged: dict[tuple[str, str], Any] = {}
    for seed in range(args.seeds):
        try:
            results = run_checks(args.suite, seed=seed, inject_fault=args.inject_fault,
                                 scale=args.scale, max_width=args.max_width)
        except ValueError as e:
            raise CLIError(f"config: {e}", EXIT_CONFIG) from e
        for r in results:
            key = (r.suite, r.name)
            if key not in merged:
                merged[key] = r
            else:
                prev = merged[key]
                prev.seconds += r.seconds
                prev.max_dev = max(prev.max_dev, r.max_dev)
    rows = list(merged.values())
    width = max(len(r.name) for r in rows)
    print(f"{'suite':<10} {'property':<{width}} {'max dev':>12} {'tol':>9} {'time s':>7}  result")
    for r in rows:
        print(f"{r.suite:<10} {r.name:<{width}} {r.max_dev:>12.3e} {r.tol:>9.1e} "
              f"{r.seconds:>7.2f}  {'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


def _activation(text: str) -> Activation:
    if text in ("relu", "gelu"):
        return Activation(text)
    if text.startswith("softplus:"):
        try:
            return Activation("softplus", float(text.split(":", 1)[1]))
        except (ValueError, NetSpecError) as e:
            raise argparse.ArgumentTypeError(f"bad softplus temperature in {text!r}") from e
    raise argparse.ArgumentTypeError("activation must be relu, gelu or softplus:THETA")


def cmd_gen_net(args: argparse.Namespace) -> int:
    rng = np.random.default_rng([args.seed, 0])
    try:
        net = random_net(rng, args.widths, args.activation, skip=args.with_skip,
                         maxpool=args.with_maxpool, attention=args.with_attention,
                         tokens=args.tokens, d_h=args.d_h, bias_std=args.bias_std)
    except (ValueError, NetSpecError) as e:
        raise CLIError(f"config: {e}", EXIT_CONFIG) from e
    _emit(dumps(net.to_json()) + "\n", args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _rg_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("routing-game configuration")
    g.add_argument("--alpha", type=float, default=2.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--eps", type=float, default=0.5, help="stabiliser epsilon")
    g.add_argument("--tau", type=float, default=1.0, help="myopic temperature")
    g.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ADF risk (<= 0)")
    g.add_argument("--sigma2", type=float, default=0.0, help="input noise variance for ADF")
    g.add_argument("--lambda-sm", type=float, default=0.0, help="QK oracle risk shift (<= 0)")
    g.add_argument("--lambda-ent", type=float, default=0.0, help="fan-in entropy penalty (>= 0)")
    g.add_argument("--gate", choices=("hard", "probit"), default="hard")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact",
                                     description="Attribution games and trajectory distances on small nets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="gradient (sg) or relevance (rg) maps per layer")
    p.add_argument("net")
    p.add_argument("input")
    p.add_argument("--game", choices=("sg", "rg"), default="rg")
    _rg_flags(p)
    p.add_argument("--seed-mass", type=float, default=None, help="rg relevance seed; defaults to f(x)")
    p.add_argument("--csv", help="also write layer,index,value rows here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("hellinger", help="trajectory distance between two nets at one input")
    p.add_argument("net_a", metavar="netA")
    p.add_argument("net_b", metavar="netB")
    p.add_argument("input")
    p.add_argument("--game", choices=("sg", "rg"), default="rg")
    _rg_flags(p)
    p.add_argument("--conditioned", action="store_true", help="add H_surv")
    p.add_argument("--per-pixel", metavar="CSV", help="write the terminal h2 map here")
    p.add_argument("--perm", action="store_true", help="add the permutation-invariant H_perm")
    p.add_argument("--dump-mp", metavar="JSON", help="write both processes here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_hellinger)

    p = sub.add_parser("sweep", help="cascading randomisation or input-noise sweep")
    p.add_argument("net")
    p.add_argument("inputs", help="directory of input files or one file with a list of inputs")
    p.add_argument("--mode", choices=("cascade", "noise"), default="cascade")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated seeds")
    p.add_argument("--sigmas", type=_float_list, default=[0.0, 0.1, 0.2, 0.5, 1.0])
    p.add_argument("--draws", type=int, default=16, help="noise draws per sigma")
    p.add_argument("--game", choices=("sg", "rg", "both"), default="both")
    _rg_flags(p)
    p.add_argument("-o", "--output", help="CSV path; a manifest is written next to it")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run the oracle and property suite")
    p.add_argument("--suite", choices=("all", *SUITES), default="all")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, run as 0..N-1")
    p.add_argument("--max-width", type=int, default=None, help="cap on hidden widths")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on instance counts")
    p.add_argument("--inject-fault", action="store_true",
                   help="mis-scale the routing discounts; the run must fail")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gen-net", help="deterministic He-initialised random net")
    p.add_argument("--widths", type=_int_list, required=True, help="e.g. 3,4,1")
    p.add_argument("--activation", type=_activation, default=Activation("relu"))
    p.add_argument("--with-skip", action="store_true")
    p.add_argument("--with-maxpool", action="store_true")
    p.add_argument("--with-attention", action="store_true")
    p.add_argument("--tokens", type=int, default=2)
    p.add_argument("--d-h", type=int, default=2)
    p.add_argument("--bias-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_net)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"artifact {args.command}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
