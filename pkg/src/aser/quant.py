"""Symmetric round-to-nearest fake quantization with absmax scales.

Weights are quantized per output row (``per_row``), activations per token,
i.e. per column of the ``in x tokens`` activation matrix (``per_col``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import ShapeError, as_matrix, as_vector

Axis = Literal["per_row", "per_col"]


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    axis: Axis = "per_row"
    mode: Literal["symmetric"] = "symmetric"

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be an integer in [2, 16], got {self.bits!r}")
        if self.axis not in ("per_row", "per_col"):
            raise ValueError(f"axis must be 'per_row' or 'per_col', got {self.axis!r}")
        if self.mode != "symmetric":
            raise ValueError("only symmetric quantization is supported")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    q: np.ndarray  # integer-valued float64
    scales: np.ndarray  # one per row (per_row) or column (per_col)
    spec: QuantSpec

    def __post_init__(self):
        n = self.q.shape[0] if self.spec.axis == "per_row" else self.q.shape[1]
        if self.scales.shape != (n,):
            raise ShapeError(f"expected {n} scales for {self.spec.axis}, got {self.scales.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape


def _broadcast(scales: np.ndarray, axis: Axis) -> np.ndarray:
    return scales[:, np.newaxis] if axis == "per_row" else scales[np.newaxis, :]


def quantize(a, spec: QuantSpec) -> QuantizedTensor:
    a = as_matrix(a, "a")
    qmax = spec.qmax
    reduce_axis = 1 if spec.axis == "per_row" else 0
    if a.size == 0:
        n = a.shape[1 - reduce_axis]
        return QuantizedTensor(np.zeros_like(a), np.zeros(n), spec)
    absmax = np.max(np.abs(a), axis=reduce_axis)
    scales = absmax / qmax
    safe = np.where(scales > 0, scales, 1.0)
    q = np.rint(a / _broadcast(safe, spec.axis))  # rint rounds half to even
    q = np.clip(q, -qmax, qmax) + 0.0  # +0.0 folds -0.0 into 0.0
    return QuantizedTensor(q, scales, spec)


def dequantize(t: QuantizedTensor) -> np.ndarray:
    return t.q * _broadcast(t.scales, t.spec.axis)


def fake_quant(a, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(a, spec))


def from_parts(q, scales, spec: QuantSpec) -> QuantizedTensor:
    """Rebuild a QuantizedTensor from stored integer grid and scales, validating both."""
    q = as_matrix(q, "q")
    scales = as_vector(scales, "scales")
    if np.any(q != np.rint(q)) or np.any(np.abs(q) > spec.qmax):
        raise ValueError(f"q is not on the {spec.bits}-bit symmetric integer grid")
    if np.any(scales < 0):
        raise ValueError("scales must be non-negative")
    return QuantizedTensor(q, scales, spec)
