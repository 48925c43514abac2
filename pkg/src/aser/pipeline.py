"""Per-layer quantization with error reconstruction, and simulated forward passes.

Four methods are supported:

``rtn``
    Round-to-nearest per-row weight quantization, no compensation.
``lorc``
    RTN plus a plain truncated SVD of the weight error.
``aser``
    RTN plus the whitened (activation-aware) truncated SVD of the weight error.
``aser-as``
    Outlier smoothing first, then RTN on the non-outlier part of the scaled
    weight; adapters approximate its quantization error plus the
    unquantized outlier columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import QuantizedTensor, QuantSpec, dequantize, fake_quant, quantize
from .reconstruct import (
    DEFAULT_RANK,
    Adapters,
    FixedRank,
    RankPolicy,
    plain_low_rank,
    predicted_tail_loss,
    reconstruct_error,
)
from .smooth import DEFAULT_OUTLIERS, SmoothingPlan, plan_from_data, smooth_activations, split_weight
from .tensor import ShapeError, as_matrix, matmul

METHODS = ("rtn", "lorc", "aser", "aser-as")


@dataclass(frozen=True)
class LayerCalibration:
    x: np.ndarray  # in x tokens

    def __post_init__(self):
        x = as_matrix(self.x, "calibration activations")
        if x.shape[1] < 1:
            raise ShapeError("calibration needs at least one token")
        object.__setattr__(self, "x", x)

    @property
    def token_count(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class QuantConfig:
    method: str = "aser-as"
    weight_bits: int = 4
    act_bits: int | None = 8
    rank: RankPolicy = field(default_factory=lambda: FixedRank(DEFAULT_RANK))
    f: int = DEFAULT_OUTLIERS
    ridge: float | None = None  # None: 1e-8 * trace(G) / n per layer
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        QuantSpec(self.weight_bits)
        if self.act_bits is not None:
            QuantSpec(self.act_bits)
        if self.f < 1:
            raise ValueError("f must be at least 1")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be non-negative")

    @property
    def weight_spec(self) -> QuantSpec:
        return QuantSpec(self.weight_bits, "per_row")

    @property
    def act_spec(self) -> QuantSpec | None:
        return None if self.act_bits is None else QuantSpec(self.act_bits, "per_col")


@dataclass(frozen=True)
class QuantizedLayer:
    method: str
    wq: QuantizedTensor
    plan: SmoothingPlan
    adapters: Adapters
    spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))  # sigma used for rank selection
    ridge: float = 0.0
    name: str = ""

    def __post_init__(self):
        out, inp = self.wq.shape
        if self.plan.m.shape != (inp,):
            raise ShapeError(f"smoothing vector has {self.plan.m.shape[0]} entries for {inp} inputs")
        if self.adapters.la.shape[0] != out or self.adapters.lb.shape[1] != inp:
            raise ShapeError(
                f"adapters {self.adapters.la.shape} / {self.adapters.lb.shape} do not fit a {out}x{inp} layer"
            )
        if self.method == "rtn" and (self.adapters.rank or not self.plan.is_identity):
            raise ValueError("rtn layers carry neither adapters nor smoothing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.wq.shape

    @property
    def rank(self) -> int:
        return self.adapters.rank

    def predicted_tail_loss(self) -> float:
        return predicted_tail_loss(self.adapters)


def quantize_layer(w, calib: LayerCalibration, cfg: QuantConfig, name: str = "") -> QuantizedLayer:
    w = as_matrix(w, "weight")
    x = calib.x
    out, inp = w.shape
    if x.shape[0] != inp:
        raise ShapeError(f"weight expects {inp} input channels but calibration has {x.shape[0]}")
    spec = cfg.weight_spec
    plan = SmoothingPlan.identity(inp)

    if cfg.method == "aser-as":
        plan = plan_from_data(w, x, cfg.f)
        split = split_weight(w, plan)
        wq = quantize(split.ws, spec)
        target = (split.ws - dequantize(wq)) + split.wo
        adapters, sigma, wh = reconstruct_error(target, smooth_activations(x, plan), cfg.rank, cfg.ridge)
        return QuantizedLayer(cfg.method, wq, plan, adapters, sigma, wh.ridge, name)

    wq = quantize(w, spec)
    if cfg.method == "rtn":
        return QuantizedLayer("rtn", wq, plan, Adapters.empty(out, inp), name=name)
    err = w - dequantize(wq)
    if cfg.method == "lorc":
        adapters, sigma = plain_low_rank(err, cfg.rank)
        return QuantizedLayer("lorc", wq, plan, adapters, sigma, 0.0, name)
    adapters, sigma, wh = reconstruct_error(err, x, cfg.rank, cfg.ridge)
    return QuantizedLayer("aser", wq, plan, adapters, sigma, wh.ridge, name)


def forward_quantized(layer: QuantizedLayer, x, act_spec: QuantSpec | None = None) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[0] != layer.shape[1]:
        raise ShapeError(f"layer expects {layer.shape[1]} input channels, got {x.shape[0]}")
    xs = smooth_activations(x, layer.plan)
    if act_spec is not None:
        xs = fake_quant(xs, act_spec)
    y = dequantize(layer.wq) @ xs
    if layer.adapters.rank:
        y = y + layer.adapters.apply(xs)
    return y


def forward_reference(w, x) -> np.ndarray:
    return matmul(w, x)
