"""Command-line entry point: ``aser {quantize,diagnose,eval,gen-toy}``.

Exit codes: 0 success, 1 usage or input error, 2 some layers failed.
Data goes to stdout or ``--out``; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .diagnostics import (
    DEFAULT_TOP_K,
    dumps_json,
    rank_table,
    remaining_error,
    smoothing_report,
    spectrum_report,
    write_report,
)
from .linalg import effective_rank
from .model import (
    ManifestError,
    gen_toy_model,
    load_bundle,
    load_quantized,
    quantize_model,
    save_bundle,
    save_quantized,
)
from .pipeline import METHODS, QuantConfig, quantize_layer
from .quant import dequantize, quantize
from .reconstruct import ALPHA_GRID, DEFAULT_RANK, FixedRank, ThresholdRank, compute_whitener, whitening_svd
from .smooth import DEFAULT_OUTLIERS, plan_from_data
from .tensor import TensorFileError

log = logging.getLogger("aser")

BUILTIN = {
    "method": "aser-as",
    "bits_w": 4,
    "bits_a": 8,
    "rank": DEFAULT_RANK,
    "alpha": None,
    "r_max": None,
    "f": DEFAULT_OUTLIERS,
    "ridge": None,
    "seed": 0,
}
TOY_DEFAULTS = {"f": 8, "rank": 16}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bits_a(text: str) -> int | None:
    if text.lower() == "none":
        return None
    return int(text)


def _ridge(text: str) -> float | None:
    if text.lower() == "auto":
        return None
    value = float(text)
    if value < 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError("ridge must be a finite non-negative number or 'auto'")
    return value


def _alphas(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, help="quantization method (default: aser-as)")
    p.add_argument("--bits-w", type=int, help="weight bit-width, per output channel (default: 4)")
    p.add_argument("--bits-a",
                   help="activation bit-width, per token, or 'none' (default: 8)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--rank", type=int, help="fixed adapter rank per layer (default: 64)")
    group.add_argument("--alpha", type=float,
                       help="select rank per layer by cumulative singular-value share below alpha "
                            "(mutually exclusive with --rank)")
    p.add_argument("--r-max", type=int,
                   help="upper clamp for --alpha rank selection (default: min(out, in) / 4)")
    p.add_argument("--f", type=int, help="number of outlier channels to smooth (default: 32)")
    p.add_argument("--ridge",
                   help="Gram damping before Cholesky, or 'auto' (default: auto = 1e-8 * trace / n)")
    p.add_argument("--seed", type=int, help="seed recorded with the outputs (default: 0)")
    p.add_argument("--jobs", type=int, default=None,
                   help="layers processed concurrently (default: available cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aser", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", parents=[common], help="quantize every layer in a manifest")
    q.add_argument("--manifest", required=True, help="model manifest (JSON)")
    q.add_argument("--out", required=True, help="output directory for the quantized bundle")
    _add_quant_flags(q)

    d = sub.add_parser("diagnose", parents=[common], help="emit spectra, effective ranks, outlier and rank statistics")
    d.add_argument("--manifest", required=True, help="model manifest (JSON)")
    d.add_argument("--out", help="directory for diagnostics.json (default: print to stdout)")
    d.add_argument("--alphas", type=_alphas, default=list(ALPHA_GRID),
                   help="alpha grid for the rank table (default: 0.015,0.03,0.05,0.075,0.1)")
    d.add_argument("--top-k", type=int, default=DEFAULT_TOP_K,
                   help="singular values kept per spectrum (default: 128)")
    _add_quant_flags(d)

    e = sub.add_parser("eval", parents=[common], help="remaining output error per layer and method")
    e.add_argument("--manifest", required=True, help="original model manifest (JSON)")
    e.add_argument("--bundle", action="append", default=[],
                   help="quantized bundle directory; repeat to compare several")
    e.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m],
                   help="comma-separated methods to quantize in memory and evaluate")
    e.add_argument("--format", choices=("text", "json"), default="text",
                   help="output format (default: text)")
    _add_quant_flags(e)

    g = sub.add_parser("gen-toy", parents=[common], help="write a synthetic model bundle with outlier channels")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--layers", type=int, default=4, help="number of layers (default: 4)")
    g.add_argument("--out-dim", type=int, default=64, help="output channels per layer (default: 64)")
    g.add_argument("--in-dim", type=int, default=64, help="input channels per layer (default: 64)")
    g.add_argument("--tokens", type=int, default=4096, help="calibration tokens per layer (default: 4096)")
    g.add_argument("--outlier-channels", type=int, default=3,
                   help="heavy input channels per layer (default: 3)")
    g.add_argument("--outlier-gain", type=float, default=100.0,
                   help="activation multiplier on heavy channels (default: 100)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    g.add_argument("--default-f", type=int, default=TOY_DEFAULTS["f"],
                   help="outlier count recorded as a manifest default (default: 8)")
    g.add_argument("--default-rank", type=int, default=TOY_DEFAULTS["rank"],
                   help="adapter rank recorded as a manifest default (default: 16)")
    return parser


def resolve_config(args: argparse.Namespace, defaults: dict[str, Any] | None = None) -> QuantConfig:
    """Flags override manifest defaults, which override built-ins."""
    defaults = defaults or {}
    unknown = set(defaults) - set(BUILTIN)
    if unknown:
        raise UsageError(f"unknown manifest default(s): {', '.join(sorted(unknown))}")

    def pick(key: str):
        value = getattr(args, key, None)
        if value is not None:
            return value
        if key in defaults:
            return defaults[key]
        return BUILTIN[key]

    if args.rank is not None or args.alpha is not None:
        rank, alpha = args.rank, args.alpha
    elif "rank" in defaults or "alpha" in defaults:
        rank, alpha = defaults.get("rank"), defaults.get("alpha")
    else:
        rank, alpha = BUILTIN["rank"], None
    if rank is not None and alpha is not None:
        raise UsageError("--rank and --alpha are mutually exclusive")
    bits_a = args.bits_a if args.bits_a is not None else defaults.get("bits_a", BUILTIN["bits_a"])
    ridge = args.ridge if args.ridge is not None else defaults.get("ridge", BUILTIN["ridge"])
    try:
        if isinstance(bits_a, str):
            bits_a = _bits_a(bits_a)
        if isinstance(ridge, str):
            ridge = _ridge(ridge)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad --bits-a/--ridge value: {exc}") from exc
    try:
        policy = ThresholdRank(float(alpha), pick("r_max")) if alpha is not None else FixedRank(int(rank))
        return QuantConfig(
            method=pick("method"),
            weight_bits=int(pick("bits_w")),
            act_bits=bits_a,
            rank=policy,
            f=int(pick("f")),
            ridge=ridge,
            seed=int(pick("seed")),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _check_jobs(args) -> int | None:
    if args.jobs is not None and args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return args.jobs


def cmd_quantize(args) -> int:
    bundle, calib = load_bundle(args.manifest)
    cfg = resolve_config(args, bundle.defaults)
    result = quantize_model(bundle, calib, cfg, jobs=_check_jobs(args))
    out = Path(args.out)
    save_quantized(out, result, cfg)
    write_report(result.report, out / "report.json", "json")
    write_report(result.report, out / "report.csv", "csv")
    for name, msg in result.failures.items():
        print(f"layer {name}: {msg}", file=sys.stderr)
    log.info("quantized %d/%d layers into %s", len(result.layers), len(bundle), out)
    return 2 if result.failures else 0


def cmd_diagnose(args) -> int:
    bundle, calib = load_bundle(args.manifest)
    cfg = resolve_config(args, bundle.defaults)
    if args.top_k < 1:
        raise UsageError("--top-k must be at least 1")
    for a in args.alphas:
        if not 0.0 < a < 1.0:
            raise UsageError(f"alpha {a} outside (0, 1)")
    r_max = cfg.rank.r_max if isinstance(cfg.rank, ThresholdRank) else None
    layers, whitened, failures = [], {}, {}
    for entry in bundle.layers:
        w, x = entry.w, calib[entry.name].x
        try:
            err = w - dequantize(quantize(w, cfg.weight_spec))
            spec = spectrum_report(err, x, args.top_k)
            wh = compute_whitener(x, cfg.ridge)
            sigma_white = whitening_svd(err, wh).sigma
            plan = plan_from_data(w, x, cfg.f)
            smooth = smoothing_report(x, plan)
        except Exception as exc:  # noqa: BLE001 - reported per layer
            failures[entry.name] = f"{type(exc).__name__}: {exc}"
            continue
        whitened[entry.name] = sigma_white
        xbar = np.mean(np.abs(x), axis=1)
        wbar = np.mean(np.abs(w), axis=0)
        layers.append({
            "layer": entry.name,
            "spectrum_weight_error": spec.weight,
            "spectrum_output_error": spec.activation,
            "zero_error": spec.zero,
            "effective_rank_weight_error": None if spec.zero else effective_rank(spec.weight),
            "effective_rank_output_error": None if spec.zero else effective_rank(spec.activation),
            "whitened_spectrum": sigma_white[: args.top_k],
            "xbar": xbar,
            "wbar": wbar,
            "score": xbar * wbar,
            "outlier_idx": [int(i) for i in plan.outlier_idx],
            "m": plan.m,
            "absmax_before": smooth.absmax_before,
            "absmax_after": smooth.absmax_after,
            "absmax_max_before": smooth.max_before,
            "absmax_max_after": smooth.max_after,
            "outlier_ratio_mean": smooth.outlier_ratio_mean,
        })
    table = rank_table(whitened, args.alphas, r_max)
    doc = {
        "model": bundle.name,
        "bits_w": cfg.weight_bits,
        "f": cfg.f,
        "ridge": "auto" if cfg.ridge is None else cfg.ridge,
        "layers": layers,
        "rank_table": {"alphas": table.alphas, "ranks": table.ranks, "mean_rank": table.mean_rank},
        "failed": failures,
    }
    text = dumps_json(doc) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    for name, msg in failures.items():
        print(f"layer {name}: {msg}", file=sys.stderr)
    return 2 if failures else 0


def cmd_eval(args) -> int:
    bundle, calib = load_bundle(args.manifest)
    cfg = resolve_config(args, bundle.defaults)
    weights = {e.name: e.w for e in bundle.layers}
    act_spec = cfg.act_spec
    runs: list[tuple[str, list]] = []
    for bdir in args.bundle:
        layers, qcfg = load_quantized(bdir)
        for layer in layers:
            if layer.name not in weights:
                raise ManifestError(f"bundle {bdir} has layer {layer.name!r} not in the manifest")
            if weights[layer.name].shape != layer.shape:
                raise ManifestError(f"bundle {bdir} layer {layer.name!r} is {layer.shape}, "
                                    f"manifest weight is {weights[layer.name].shape}")
        runs.append((str(qcfg.get("method", bdir)), layers))
    for method in args.methods or []:
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}")
        mcfg = QuantConfig(method, cfg.weight_bits, cfg.act_bits, cfg.rank, cfg.f, cfg.ridge, cfg.seed)
        runs.append((method, [quantize_layer(e.w, calib[e.name], mcfg, e.name) for e in bundle.layers]))

    rows = []
    totals = []
    for method, layers in runs:
        sq = sq_act = 0.0
        for layer in layers:
            x = calib[layer.name].x
            err = remaining_error(weights[layer.name], layer, x)
            err_act = remaining_error(weights[layer.name], layer, x, act_spec) if act_spec else None
            sq += err * err
            sq_act += (err_act or 0.0) ** 2
            rows.append({"method": method, "layer": layer.name, "remaining_error": err,
                         "remaining_error_act": err_act})
        totals.append({"method": method, "layers": len(layers), "total_remaining_error": math.sqrt(sq),
                       "total_remaining_error_act": math.sqrt(sq_act) if act_spec else None})
    if args.format == "json":
        sys.stdout.write(dumps_json({"bits_a": cfg.act_bits, "layers": rows, "totals": totals}) + "\n")
    else:
        print("method\tlayer\tremaining_error\tremaining_error_act")
        for r in rows:
            act = "" if r["remaining_error_act"] is None else f"{r['remaining_error_act']:.10g}"
            print(f"{r['method']}\t{r['layer']}\t{r['remaining_error']:.10g}\t{act}")
        for t in totals:
            act = "" if t["total_remaining_error_act"] is None else f"{t['total_remaining_error_act']:.10g}"
            print(f"{t['method']}\tTOTAL\t{t['total_remaining_error']:.10g}\t{act}")
    return 0


def cmd_gen_toy(args) -> int:
    try:
        bundle, calib = gen_toy_model(args.layers, args.out_dim, args.in_dim, args.tokens,
                                      args.outlier_channels, args.outlier_gain, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.default_f < 1 or args.default_rank < 0:
        raise UsageError("--default-f must be >= 1 and --default-rank >= 0")
    bundle.defaults = {"f": args.default_f, "rank": args.default_rank, "seed": args.seed}
    manifest = save_bundle(args.out, bundle, calib)
    print(manifest)
    return 0


COMMANDS = {
    "quantize": cmd_quantize,
    "diagnose": cmd_diagnose,
    "eval": cmd_eval,
    "gen-toy": cmd_gen_toy,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"aser {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"aser {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except (ManifestError, TensorFileError, ValueError) as exc:
        print(f"aser {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
