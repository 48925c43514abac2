"""Outlier-channel analysis and activation smoothing.

Outlier channels are the input channels with the largest product of mean
absolute activation and mean absolute weight. Each outlier channel ``i`` is
scaled by ``m_i = xbar_i / min(xbar over outliers)``; activations are
divided by ``m`` and weights multiplied by it, and the scaled outlier
columns of the weight are split off into ``wo`` so they are never quantized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_matrix, as_vector, scale_cols

DEFAULT_OUTLIERS = 32


class DegenerateChannelError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothingPlan:
    m: np.ndarray
    outlier_idx: np.ndarray  # strictly increasing int indices
    f: int

    @classmethod
    def identity(cls, channels: int) -> "SmoothingPlan":
        return cls(np.ones(channels), np.zeros(0, dtype=np.int64), 0)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.m == 1.0))


@dataclass(frozen=True)
class WeightSplit:
    ws: np.ndarray
    wo: np.ndarray


def channel_absmean(a, axis: str) -> np.ndarray:
    """Mean |a| per channel.

    ``axis="rows"`` averages each row (activation ``X``, in x tokens);
    ``axis="cols"`` averages each column (weight ``W``, out x in).
    """
    a = as_matrix(a, "a")
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    reduce_axis = 1 if axis == "rows" else 0
    if a.shape[reduce_axis] == 0:
        raise ValueError("cannot average over an empty axis")
    return np.mean(np.abs(a), axis=reduce_axis)


def select_outliers(xbar, wbar, f: int) -> np.ndarray:
    xbar = as_vector(xbar, "xbar")
    wbar = as_vector(wbar, "wbar")
    if xbar.shape != wbar.shape:
        raise ShapeError(f"xbar has {xbar.shape[0]} channels but wbar has {wbar.shape[0]}")
    if f < 1:
        raise ValueError("outlier count f must be at least 1")
    f = min(f, xbar.shape[0])
    # stable sort on the negated score: ties keep the lower index first
    order = np.argsort(-(xbar * wbar), kind="stable")
    return np.sort(order[:f]).astype(np.int64)


def build_plan(xbar, outlier_idx, f: int | None = None) -> SmoothingPlan:
    xbar = as_vector(xbar, "xbar")
    idx = np.asarray(outlier_idx, dtype=np.int64)
    if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= xbar.shape[0]):
        raise ValueError("outlier indices must be strictly increasing and in range")
    m = np.ones(xbar.shape[0])
    if idx.size:
        sub = xbar[idx]
        if np.any(sub <= 0):
            bad = int(idx[np.flatnonzero(sub <= 0)[0]])
            raise DegenerateChannelError(f"channel {bad} has zero mean activation; smoothing undefined")
        m[idx] = sub / sub.min()
    return SmoothingPlan(m, idx, int(idx.size if f is None else min(f, xbar.shape[0])))


def plan_from_data(w, x, f: int = DEFAULT_OUTLIERS) -> SmoothingPlan:
    """Outlier selection and scales from raw (unquantized) weight and activations."""
    xbar = channel_absmean(x, "rows")
    wbar = channel_absmean(w, "cols")
    return build_plan(xbar, select_outliers(xbar, wbar, f), f)


def split_weight(w, plan: SmoothingPlan) -> WeightSplit:
    w = as_matrix(w, "w")
    if w.shape[1] != plan.m.shape[0]:
        raise ShapeError(f"weight has {w.shape[1]} input channels but plan has {plan.m.shape[0]}")
    wm = scale_cols(w, plan.m)
    wo = np.zeros_like(wm)
    wo[:, plan.outlier_idx] = wm[:, plan.outlier_idx]
    ws = wm.copy()
    ws[:, plan.outlier_idx] = 0.0
    return WeightSplit(ws, wo)


def smooth_activations(x, plan: SmoothingPlan) -> np.ndarray:
    """``M^-1 X``: divide each input channel by its scale."""
    x = as_matrix(x, "x")
    if plan.is_identity:
        return x
    if x.shape[0] != plan.m.shape[0]:
        raise ShapeError(f"activation has {x.shape[0]} channels but plan has {plan.m.shape[0]}")
    return x / plan.m[:, np.newaxis]
