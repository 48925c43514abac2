"""Dense factorizations: Cholesky, triangular solves, one-sided Jacobi SVD."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from .tensor import ShapeError, as_matrix, as_vector

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot_index: int, pivot_value: float):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot_index} is {pivot_value:.6g}"
        )


class SingularTriangularError(np.linalg.LinAlgError):
    pass


class SvdConvergenceError(np.linalg.LinAlgError):
    def __init__(self, sweeps: int, residual: float):
        self.sweeps = sweeps
        self.residual = residual
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max relative off-diagonal {residual:.3e})"
        )


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x k, orthonormal columns
    sigma: np.ndarray  # k, descending
    vt: np.ndarray  # k x n, orthonormal rows

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = len(self.sigma) if rank is None else rank
        return (self.u[:, :r] * self.sigma[:r]) @ self.vt[:r]


def cholesky_lower(g, ridge: float = 0.0) -> np.ndarray:
    """Lower factor ``L`` with ``L @ L.T == g + ridge * I``.

    Raises NotPositiveDefiniteError naming the first non-positive pivot.
    """
    g = as_matrix(g, "g")
    n = g.shape[0]
    if g.shape != (n, n):
        raise ShapeError(f"Cholesky needs a square matrix, got {g.shape}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    a = g + ridge * np.eye(n)
    L = np.zeros((n, n))
    for j in range(n):
        row = L[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        d = np.sqrt(pivot)
        L[j, j] = d
        if j + 1 < n:
            L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ row) / d
    return L


def _check_triangular(l: np.ndarray) -> None:
    n = l.shape[0]
    if l.shape != (n, n):
        raise ShapeError(f"triangular factor must be square, got {l.shape}")
    diag = np.diag(l)
    if np.any(diag == 0.0):
        i = int(np.flatnonzero(diag == 0.0)[0])
        raise SingularTriangularError(f"zero diagonal element at index {i}")


def solve_lower(l, b) -> np.ndarray:
    """Solve ``L @ Y = B`` for lower-triangular ``L``."""
    l = as_matrix(l, "l")
    b = as_matrix(b, "b")
    _check_triangular(l)
    if b.shape[0] != l.shape[0]:
        raise ShapeError(f"cannot solve {l.shape[0]}x{l.shape[1]} system with rhs {b.shape[0]}x{b.shape[1]}")
    return solve_triangular(l, b, lower=True, check_finite=False)


def solve_lower_right(b, l) -> np.ndarray:
    """Solve ``Y @ L = B`` for lower-triangular ``L``, i.e. ``B @ L^-1``."""
    l = as_matrix(l, "l")
    b = as_matrix(b, "b")
    _check_triangular(l)
    if b.shape[1] != l.shape[0]:
        raise ShapeError(f"cannot right-solve {b.shape[0]}x{b.shape[1]} against {l.shape[0]}x{l.shape[1]}")
    # Y L = B  <=>  L^T Y^T = B^T
    return solve_triangular(l, b.T, lower=True, trans="T", check_finite=False).T


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament ordering: n-1 rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_columns(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``a``; return (b, v) with ``a @ v == b``."""
    n = a.shape[1]
    # rotate rows of the transposes so each column gather is contiguous
    bt = np.array(a.T, order="C")
    vt = np.eye(n)
    rounds = _round_robin(n)
    residual = 0.0
    for _ in range(max_sweeps):
        rotated = False
        residual = 0.0
        for p, q in rounds:
            bp, bq = bt[p], bt[q]
            alpha = np.einsum("ij,ij->i", bp, bp)
            beta = np.einsum("ij,ij->i", bq, bq)
            gamma = np.einsum("ij,ij->i", bp, bq)
            scale = np.sqrt(alpha * beta)
            off = np.abs(gamma)
            hot = off > tol * scale
            if not hot.any():
                continue
            rotated = True
            residual = max(residual, float(np.max(off[hot] / scale[hot])))
            p, q = p[hot], q[hot]
            bp, bq = bp[hot], bq[hot]
            alpha, beta, gamma = alpha[hot], beta[hot], gamma[hot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = (1.0 / np.hypot(1.0, t))[:, np.newaxis]
            s = c * t[:, np.newaxis]
            bt[p] = c * bp - s * bq
            bt[q] = s * bp + c * bq
            vp, vq = vt[p], vt[q]
            vt[p] = c * vp - s * vq
            vt[q] = s * vp + c * vq
        if not rotated:
            return bt.T, vt.T
    raise SvdConvergenceError(max_sweeps, residual)


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Fill the columns flagged in ``missing`` with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    good = [u[:, j] for j in range(u.shape[1]) if not missing[j]]
    candidate = 0
    for j in np.flatnonzero(missing):
        while True:
            e = np.zeros(m)
            e[candidate % m] = 1.0
            candidate += 1
            for _ in range(2):
                for g in good:
                    e -= (g @ e) * g
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                break
        u[:, j] = e / nrm
        good.append(u[:, j])
    return u


def _tall_svd(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    work, v = _jacobi_columns(a, tol, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma, work, v = sigma[order], work[:, order], v[:, order]
    missing = sigma == 0.0
    u = np.zeros_like(work)
    u[:, ~missing] = work[:, ~missing] / sigma[~missing]
    if missing.any():
        u = _complete_basis(u, missing)
    return u, sigma, v


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # first entry above noise level in each U column is made non-negative
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-12)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            vt[j] = -vt[j]


def svd(a, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """Thin SVD by cyclic one-sided Jacobi rotations.

    Rotations run over a fixed round-robin pair schedule, so the result is
    deterministic for a given input. A sweep with no rotation above
    ``tol`` (relative cosine between column pairs) terminates the iteration.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m == 0 or n == 0:
        k = min(m, n)
        return SvdResult(np.zeros((m, k)), np.zeros(k), np.zeros((k, n)))
    if m >= n:
        u, sigma, v = _tall_svd(a, tol, max_sweeps)
        vt = v.T.copy()
    else:
        ut, sigma, vt_t = _tall_svd(a.T, tol, max_sweeps)
        u, vt = vt_t, ut.T.copy()
    _fix_signs(u, vt)
    return SvdResult(u, sigma, vt)


def effective_rank(sigma, epsilon: float = 1e-12) -> float:
    """Exponential of the entropy of the normalized singular values.

    ``epsilon`` sits inside the logarithm so the probabilities still sum to
    one; with ``epsilon == 0`` zero entries contribute nothing.
    """
    s = as_vector(sigma, "sigma")
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    total = s.sum()
    if not total > 0:
        raise ValueError("effective rank is undefined for an all-zero spectrum")
    p = s / total
    if epsilon == 0:
        p = p[p > 0]
        h = -np.sum(p * np.log(p))
    else:
        h = -np.sum(p * np.log(p + epsilon))
    return float(np.exp(h))
