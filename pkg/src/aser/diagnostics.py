"""Error, spectrum, outlier and overhead measurements, plus report serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .linalg import effective_rank, svd
from .pipeline import QuantizedLayer, forward_quantized, forward_reference
from .quant import QuantSpec, dequantize
from .reconstruct import ALPHA_GRID, ThresholdRank, select_rank
from .smooth import SmoothingPlan, channel_absmean, smooth_activations, split_weight
from .tensor import ShapeError, as_matrix, fro_norm

DEFAULT_TOP_K = 128
CHANNEL_TOP_K = 32


def remaining_error(w, layer: QuantizedLayer, x, act_spec: QuantSpec | None = None) -> float:
    """``||W X - forward_quantized(layer, X)||_F``; activation quantization only if ``act_spec``."""
    w = as_matrix(w, "w")
    if w.shape != layer.shape:
        raise ShapeError(f"weight {w.shape} does not match quantized layer {layer.shape}")
    return fro_norm(forward_reference(w, x) - forward_quantized(layer, x, act_spec))


def activation_spectrum(target, x) -> np.ndarray:
    """Singular values of ``target @ x`` without forming the wide product.

    With ``x^T = Q R`` (thin QR), ``target @ x = (target @ R^T) Q^T`` and
    ``Q`` has orthonormal columns, so both share singular values. The result
    has ``min(out, tokens)`` entries; those past the input width are zero.
    """
    target = as_matrix(target, "target")
    x = as_matrix(x, "x")
    if target.shape[1] != x.shape[0]:
        raise ShapeError(f"target {target.shape} cannot multiply activations {x.shape}")
    if x.shape[1] > x.shape[0]:
        r = np.linalg.qr(x.T, mode="r")
        sigma = svd(target @ r.T).sigma
        k = min(target.shape[0], x.shape[1])
        return np.concatenate([sigma, np.zeros(k - sigma.size)])
    return svd(target @ x).sigma


@dataclass
class SpectrumPair:
    weight: np.ndarray  # normalized sigma(E_q), top-k
    activation: np.ndarray  # normalized sigma(E_q X), top-k
    zero: bool = False


def _normalized_top(sigma: np.ndarray, k: int) -> np.ndarray:
    top = sigma[:k].copy()
    if top.size and top[0] > 0:
        top /= top[0]
    return top


def spectrum_report(target, x, top_k: int = DEFAULT_TOP_K) -> SpectrumPair:
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    s_w = svd(as_matrix(target, "target")).sigma
    s_a = activation_spectrum(target, x)
    zero = not (s_w.size and s_w[0] > 0)
    return SpectrumPair(_normalized_top(s_w, top_k), _normalized_top(s_a, top_k), zero)


@dataclass
class RankTable:
    alphas: list[float]
    ranks: dict[str, list[int]]  # layer -> rank per alpha
    mean_rank: list[float]


def rank_table(spectra: Mapping[str, np.ndarray], alphas: Sequence[float] = ALPHA_GRID,
               r_max: int | None = None) -> RankTable:
    alphas = [float(a) for a in alphas]
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValueError(f"alpha {a} outside (0, 1)")
    ranks = {
        name: [select_rank(sigma, ThresholdRank(a, r_max)) for a in alphas]
        for name, sigma in spectra.items()
    }
    if ranks:
        mean = [float(np.mean([r[i] for r in ranks.values()])) for i in range(len(alphas))]
    else:
        mean = [0.0] * len(alphas)
    return RankTable(alphas, ranks, mean)


def overhead_estimate(s: int, d: int, r: float) -> tuple[float, float]:
    """Relative (FLOPs %, parameters %) added by rank-``r`` adapters on a ``d x d`` layer.

    Base costs are ``s d^2`` and ``d^2``; the adapters add ``2 s r d`` and
    ``2 r d``, so both overheads are ``200 r / d`` percent (``s`` cancels).
    """
    if s <= 0 or d <= 0:
        raise ValueError("sequence length and hidden size must be positive")
    if r < 0:
        raise ValueError("rank must be non-negative")
    pct = 100.0 * 2.0 * r / d
    return pct, pct


def layer_overhead(out: int, inp: int, r: float) -> tuple[float, float]:
    """Rectangular form of overhead_estimate: ``r (out + in)`` extra per ``out * in``."""
    pct = 100.0 * r * (out + inp) / (out * inp)
    return pct, pct


@dataclass
class SmoothingStats:
    absmax_before: np.ndarray
    absmax_after: np.ndarray
    outlier_idx: np.ndarray
    max_before: float
    max_after: float
    min_before: float
    min_after: float
    outlier_ratio_mean: float  # mean before/after absmax over outlier channels
    outlier_ratio_max: float


def smoothing_report(x, plan: SmoothingPlan) -> SmoothingStats:
    x = as_matrix(x, "x")
    if x.shape[0] != plan.m.shape[0]:
        raise ShapeError(f"activation has {x.shape[0]} channels, plan has {plan.m.shape[0]}")
    if x.size == 0:
        raise ValueError("smoothing report needs at least one channel and one token")
    before = np.max(np.abs(x), axis=1)
    after = np.max(np.abs(smooth_activations(x, plan)), axis=1)
    idx = plan.outlier_idx
    ratio = before[idx] / np.where(after[idx] > 0, after[idx], 1.0) if idx.size else np.ones(1)
    return SmoothingStats(
        absmax_before=before,
        absmax_after=after,
        outlier_idx=idx,
        max_before=float(before.max()),
        max_after=float(after.max()),
        min_before=float(before.min()),
        min_after=float(after.min()),
        outlier_ratio_mean=float(ratio.mean()),
        outlier_ratio_max=float(ratio.max()),
    )


@dataclass
class LayerRecord:
    layer: str
    method: str
    out: int
    inp: int
    tokens: int
    rank: int
    sigma_top: list[float]
    effective_rank: float | None
    remaining_error: float
    remaining_error_act: float | None
    predicted_tail_loss: float | None
    xbar_top: list[float]
    wbar_top: list[float]
    score_top: list[float]
    score_top_idx: list[int]
    outlier_idx: list[int]
    absmax_before_max: float
    absmax_after_max: float
    absmax_before_min: float
    absmax_after_min: float
    flops_overhead_pct: float
    memory_overhead_pct: float


@dataclass
class DiagnosticsReport:
    config: dict[str, Any] = field(default_factory=dict)
    records: list[LayerRecord] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "layers": [asdict(r) for r in self.records],
            **({"extras": self.extras} if self.extras else {}),
        }


def compensation_target(w, layer: QuantizedLayer) -> np.ndarray:
    """The matrix the layer's adapters approximate (the plain weight error for rtn/lorc/aser)."""
    if layer.method == "aser-as":
        split = split_weight(w, layer.plan)
        return (split.ws - dequantize(layer.wq)) + split.wo
    return as_matrix(w) - dequantize(layer.wq)


def layer_record(name: str, w, x, layer: QuantizedLayer, act_spec: QuantSpec | None = None,
                 top_k: int = DEFAULT_TOP_K) -> LayerRecord:
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    out, inp = w.shape
    xs = smooth_activations(x, layer.plan)
    target = compensation_target(w, layer)
    act_sigma = activation_spectrum(target, xs)
    eff = effective_rank(act_sigma) if act_sigma.size and act_sigma.sum() > 0 else None

    xbar = channel_absmean(x, "rows")
    wbar = channel_absmean(w, "cols")
    score = xbar * wbar
    k = min(CHANNEL_TOP_K, inp)
    top = np.argsort(-score, kind="stable")[:k]
    sm = smoothing_report(x, layer.plan)
    flops, mem = layer_overhead(out, inp, layer.rank)
    predicted = layer.predicted_tail_loss() if layer.method in ("aser", "aser-as") else None
    return LayerRecord(
        layer=name,
        method=layer.method,
        out=out,
        inp=inp,
        tokens=x.shape[1],
        rank=layer.rank,
        sigma_top=[float(v) for v in layer.spectrum[:top_k]],
        effective_rank=eff,
        remaining_error=remaining_error(w, layer, x),
        remaining_error_act=None if act_spec is None else remaining_error(w, layer, x, act_spec),
        predicted_tail_loss=predicted,
        xbar_top=[float(v) for v in xbar[top]],
        wbar_top=[float(v) for v in wbar[top]],
        score_top=[float(v) for v in score[top]],
        score_top_idx=[int(i) for i in top],
        outlier_idx=[int(i) for i in layer.plan.outlier_idx],
        absmax_before_max=sm.max_before,
        absmax_after_max=sm.max_after,
        absmax_before_min=sm.min_before,
        absmax_after_min=sm.min_after,
        flops_overhead_pct=flops,
        memory_overhead_pct=mem,
    )


# -- serialization -----------------------------------------------------------

def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite value {v!r}")
    text = f"{v:.17g}"
    if "." not in text and "e" not in text:
        text += ".0"
    return text


def _json_scalar(v: Any) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps_json(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON with floats printed to 17 significant digits and insertion-ordered keys."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{_json_scalar(str(k))}: {dumps_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (Mapping, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_json_scalar(v) for v in obj) + "]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    return _json_scalar(obj)


CSV_HEADER = ("layer", "method", "metric", "value")


def _csv_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ";".join(_csv_value(x) for x in v)
    if v is None:
        return ""
    return _json_scalar(v).strip('"') if not isinstance(v, str) else v


def report_rows(report: DiagnosticsReport) -> Iterable[tuple[str, str, str, str]]:
    for rec in report.records:
        for key, value in asdict(rec).items():
            if key in ("layer", "method"):
                continue
            yield rec.layer, rec.method, key, _csv_value(value)


def write_report(report: DiagnosticsReport, path: str | os.PathLike, fmt: str = "json") -> None:
    if fmt == "json":
        text = dumps_json(report.to_dict()) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(report_rows(report))
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}; use 'json' or 'csv'")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
