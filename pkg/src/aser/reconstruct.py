"""Low-rank error reconstruction in the activation-whitened metric.

With ``S`` the Cholesky factor of the calibration Gram ``X X^T``, the
activations ``S^-1 X`` are orthonormal, so truncating component ``i`` of
``SVD(E S)`` costs exactly ``sigma_i`` in ``||(E - E_r) X||_F``. The
adapters ``la = U_r Sigma_r`` and ``lb = V_r^T S^-1`` therefore give the
output-optimal rank-``r`` compensation of ``E``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .linalg import SvdResult, cholesky_lower, solve_lower, solve_lower_right, svd
from .tensor import ShapeError, as_matrix, as_vector, gram

ALPHA_GRID = (0.015, 0.03, 0.05, 0.075, 0.1)
DEFAULT_RANK = 64


@dataclass(frozen=True)
class Whitener:
    s: np.ndarray  # lower triangular
    ridge: float

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def whiten(self, x) -> np.ndarray:
        """``S^-1 X`` by forward substitution."""
        return solve_lower(self.s, x)


@dataclass(frozen=True)
class Adapters:
    la: np.ndarray  # out x r
    lb: np.ndarray  # r x in
    sigma_tail: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rank(self) -> int:
        return self.la.shape[1]

    @classmethod
    def empty(cls, out: int, inp: int) -> "Adapters":
        return cls(np.zeros((out, 0)), np.zeros((0, inp)), np.zeros(0))

    def product(self) -> np.ndarray:
        return self.la @ self.lb

    def apply(self, x) -> np.ndarray:
        """``la @ (lb @ x)``, never forming the full product."""
        return self.la @ (self.lb @ x)


@dataclass(frozen=True)
class FixedRank:
    r: int

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("rank must be non-negative")


@dataclass(frozen=True)
class ThresholdRank:
    alpha: float
    r_max: int | None = None  # None: a quarter of the spectrum length

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.r_max is not None and self.r_max < 1:
            raise ValueError("r_max must be at least 1")


RankPolicy = Union[FixedRank, ThresholdRank]


def default_ridge(g: np.ndarray) -> float:
    n = g.shape[0]
    return 1e-8 * float(np.trace(g)) / n if n else 0.0


def compute_whitener(x, ridge: float | None = 0.0) -> Whitener:
    """Cholesky whitener of the activation Gram; ``ridge=None`` uses 1e-8 * trace / n."""
    x = as_matrix(x, "x")
    if x.shape[1] < 1:
        raise ShapeError("calibration activations need at least one token column")
    g = gram(x)
    if ridge is None:
        ridge = default_ridge(g)
    return Whitener(cholesky_lower(g, ridge), float(ridge))


def whitening_svd(target, w: Whitener) -> SvdResult:
    target = as_matrix(target, "target")
    if target.shape[1] != w.n:
        raise ShapeError(f"target has {target.shape[1]} columns but whitener is {w.n}x{w.n}")
    return svd(target @ w.s)


def select_rank(sigma, policy: RankPolicy) -> int:
    """Adapter rank from a descending spectrum.

    ``ThresholdRank`` takes the largest ``r`` whose cumulative share of the
    singular-value sum stays below ``alpha``, clamped to ``[1, r_max]``.
    """
    sigma = as_vector(sigma, "sigma")
    k = sigma.shape[0]
    if isinstance(policy, FixedRank):
        return min(policy.r, k)
    total = sigma.sum()
    if k == 0 or not total > 0:
        return 0
    share = np.cumsum(sigma) / total
    r = int(np.count_nonzero(share < policy.alpha))
    r_max = policy.r_max if policy.r_max is not None else max(1, k // 4)
    return int(min(max(r, 1), r_max, k))


def build_adapters(dec: SvdResult, w: Whitener | None, r: int) -> Adapters:
    """``la = U_r Sigma_r``, ``lb = V_r^T S^-1`` (or ``V_r^T`` when ``w`` is None)."""
    k = dec.sigma.shape[0]
    if not 0 <= r <= k:
        raise ValueError(f"rank {r} outside [0, {k}]")
    la = dec.u[:, :r] * dec.sigma[:r]
    lb = dec.vt[:r]
    if w is not None and r > 0:
        lb = solve_lower_right(lb, w.s)
    return Adapters(la, np.array(lb), dec.sigma[r:].copy())


def predicted_tail_loss(adapters: Adapters) -> float:
    tail = adapters.sigma_tail
    return float(np.sqrt(np.sum(tail * tail)))


def reconstruct_error(target, x, policy: RankPolicy, ridge: float | None = 0.0) -> tuple[Adapters, np.ndarray, Whitener]:
    """Whiten, decompose and truncate in one call; returns (adapters, full spectrum, whitener)."""
    w = compute_whitener(x, ridge)
    dec = whitening_svd(target, w)
    r = select_rank(dec.sigma, policy)
    return build_adapters(dec, w, r), dec.sigma, w


def plain_low_rank(target, policy: RankPolicy) -> tuple[Adapters, np.ndarray]:
    """Unwhitened truncated SVD of the weight error (LoRC-style baseline)."""
    dec = svd(as_matrix(target, "target"))
    r = select_rank(dec.sigma, policy)
    return build_adapters(dec, None, r), dec.sigma
