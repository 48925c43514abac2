import math

import numpy as np
import pytest
from oracles import jacobi_eigvalsh

from aser.linalg import (
    NotPositiveDefiniteError,
    SingularTriangularError,
    cholesky_lower,
    effective_rank,
    solve_lower,
    solve_lower_right,
    svd,
)
from aser.tensor import fro_norm, gram


def _check_svd(a, res, tol=1e-9):
    k = min(a.shape)
    assert res.u.shape == (a.shape[0], k)
    assert res.vt.shape == (k, a.shape[1])
    assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)
    assert np.max(np.abs(res.u.T @ res.u - np.eye(k))) <= 1e-10
    assert np.max(np.abs(res.vt @ res.vt.T - np.eye(k))) <= 1e-10
    assert fro_norm(res.reconstruct() - a) <= tol * max(fro_norm(a), 1e-300)


# -- Cholesky ----------------------------------------------------------------

def test_cholesky_identity():
    assert np.array_equal(cholesky_lower(np.eye(4)), np.eye(4))


def test_cholesky_by_hand():
    L = cholesky_lower(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert np.allclose(L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], rtol=0, atol=1e-15)
    assert np.allclose(L @ L.T, [[4.0, 2.0], [2.0, 3.0]], atol=1e-15)


def test_cholesky_rank_deficient_gram(rng):
    x = rng.standard_normal((4, 2))
    with pytest.raises(NotPositiveDefiniteError) as info:
        cholesky_lower(gram(x), 0.0)
    assert info.value.pivot_index >= 2


def test_cholesky_ridge_recovers(rng):
    g = gram(rng.standard_normal((4, 2)))
    ridge = 1e-6 * np.trace(g) / 4
    L = cholesky_lower(g, ridge)
    assert fro_norm(L @ L.T - (g + ridge * np.eye(4))) <= 1e-10 * fro_norm(g)


def test_cholesky_roundtrip_random_spd(rng):
    for n in (1, 5, 17, 40):
        b = rng.standard_normal((n, n))
        a = b.T @ b + np.eye(n)
        L = cholesky_lower(a)
        assert np.array_equal(L, np.tril(L))
        assert fro_norm(L @ L.T - a) <= 1e-10 * fro_norm(a)
        # independent check against LAPACK
        assert np.allclose(L, np.linalg.cholesky(a), rtol=1e-10, atol=1e-12)


# -- triangular solves -------------------------------------------------------

def test_solve_lower_identity(rng):
    b = rng.standard_normal((3, 2))
    assert np.array_equal(solve_lower(np.eye(3), b), b)


def test_solve_lower_by_hand():
    y = solve_lower([[2.0, 0.0], [1.0, 1.0]], [[2.0], [2.0]])
    assert np.array_equal(y, [[1.0], [1.0]])


def test_solve_lower_residual(rng):
    b0 = rng.standard_normal((64, 64))
    L = cholesky_lower(b0 @ b0.T + np.eye(64))
    b = rng.standard_normal((64, 64))
    y = solve_lower(L, b)
    assert fro_norm(L @ y - b) <= 1e-10 * fro_norm(b)


def test_solve_lower_right_residual(rng):
    b0 = rng.standard_normal((16, 16))
    L = cholesky_lower(b0 @ b0.T + np.eye(16))
    b = rng.standard_normal((5, 16))
    y = solve_lower_right(b, L)
    assert fro_norm(y @ L - b) <= 1e-10 * fro_norm(b)


def test_solve_zero_diagonal():
    with pytest.raises(SingularTriangularError):
        solve_lower([[1.0, 0.0], [1.0, 0.0]], [[1.0], [1.0]])


# -- SVD ---------------------------------------------------------------------

def test_svd_diagonal():
    res = svd(np.diag([3.0, 1.0]))
    assert np.allclose(res.sigma, [3.0, 1.0], atol=1e-15)
    assert np.allclose(np.abs(res.u), np.eye(2)) and np.allclose(np.abs(res.vt), np.eye(2))


def test_svd_rank_one(rng):
    u = rng.standard_normal(6)
    v = rng.standard_normal(4)
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    a = np.outer(u, v)
    res = svd(a)
    assert abs(res.sigma[0] - fro_norm(a)) <= 1e-14
    assert np.all(res.sigma[1:] <= 1e-14)
    _check_svd(a, res)


def test_svd_matches_eigen_oracle(rng):
    a = rng.standard_normal((32, 32))
    res = svd(a)
    ref = np.sqrt(np.maximum(jacobi_eigvalsh(a.T @ a), 0.0))
    assert np.max(np.abs(res.sigma - ref) / ref) <= 1e-8
    _check_svd(a, res)


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (7, 3), (3, 7), (20, 20), (33, 17), (17, 33)])
def test_svd_invariants_shapes(rng, shape):
    a = rng.standard_normal(shape)
    _check_svd(a, svd(a))


def test_svd_graded_and_degenerate(rng):
    a = rng.standard_normal((24, 24)) * np.logspace(0, -10, 24)
    _check_svd(a, svd(a))
    z = np.zeros((5, 3))
    res = svd(z)
    assert np.all(res.sigma == 0)
    _check_svd(z, res)
    dup = np.hstack([a[:, :4], a[:, :4]])  # exactly rank-deficient
    _check_svd(dup, svd(dup))


def test_svd_sign_convention_and_determinism(rng):
    a = rng.standard_normal((12, 9))
    r1, r2 = svd(a), svd(a.copy())
    assert r1.u.tobytes() == r2.u.tobytes() and r1.sigma.tobytes() == r2.sigma.tobytes()
    for j in range(r1.u.shape[1]):
        col = r1.u[:, j]
        first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
        assert first > 0


def test_svd_does_not_mutate_input(rng):
    for shape in [(6, 4), (4, 6)]:
        a = rng.standard_normal(shape)
        keep = a.copy()
        svd(a)
        assert np.array_equal(a, keep)


def test_svd_eckart_young(rng):
    a = rng.standard_normal((16, 12))
    res = svd(a)
    for r in (1, 3, 6):
        best = fro_norm(a - res.reconstruct(r))
        for _ in range(100):
            p = rng.standard_normal((16, r)) @ rng.standard_normal((r, 12))
            assert best <= fro_norm(a - p) + 1e-9


# -- effective rank ----------------------------------------------------------

def test_effective_rank_examples():
    assert effective_rank([1.0, 1.0, 1.0, 1.0], 0.0) == 4.0
    assert effective_rank([1.0, 0.0, 0.0], 0.0) == 1.0
    # exp(ln 3 - (2/3) ln 2)
    expected = math.exp(math.log(3.0) - (2.0 / 3.0) * math.log(2.0))
    assert abs(effective_rank([2.0, 1.0], 0.0) - expected) <= 1e-14
    assert abs(expected - 1.8899) <= 1e-4


def test_effective_rank_bounds_and_scale_invariance(rng):
    for _ in range(50):
        s = np.sort(rng.random(rng.integers(1, 20)))[::-1]
        e = effective_rank(s, 0.0)
        assert 1.0 - 1e-12 <= e <= len(s) + 1e-12
        assert abs(effective_rank(s * 37.5, 0.0) - e) <= 1e-12 * e


def test_effective_rank_default_epsilon_close():
    s = np.array([5.0, 3.0, 1.0, 0.5])
    assert abs(effective_rank(s) - effective_rank(s, 0.0)) <= 1e-9


def test_effective_rank_errors():
    with pytest.raises(ValueError):
        effective_rank([0.0, 0.0])
    with pytest.raises(ValueError):
        effective_rank([1.0, -1.0])
