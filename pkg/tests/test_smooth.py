import numpy as np
import pytest
from oracles import top_f_bruteforce

from aser.smooth import (
    DegenerateChannelError,
    SmoothingPlan,
    build_plan,
    channel_absmean,
    plan_from_data,
    select_outliers,
    smooth_activations,
    split_weight,
)
from aser.tensor import fro_norm, scale_cols


def test_channel_absmean_examples():
    assert np.array_equal(channel_absmean([[1.0, -1.0], [2.0, -2.0]], "rows"), [1.0, 2.0])
    assert np.array_equal(channel_absmean([[1.0, 0.0], [3.0, 0.0]], "cols"), [2.0, 0.0])
    assert np.array_equal(channel_absmean(np.full((3, 5), -2.5), "rows"), np.full(3, 2.5))
    with pytest.raises(ValueError):
        channel_absmean(np.ones((2, 2)), "diag")


def test_select_outliers_examples():
    assert select_outliers([10.0, 1.0, 2.0], [1.0, 1.0, 1.0], 2).tolist() == [0, 2]
    assert select_outliers([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 2).tolist() == [0, 1]
    assert select_outliers([3.0, 1.0, 2.0], [1.0, 1.0, 1.0], 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        select_outliers([1.0], [1.0], 0)


def test_select_outliers_matches_bruteforce(rng):
    for _ in range(200):
        n = int(rng.integers(1, 12))
        # coarse values force frequent ties
        xbar = rng.integers(0, 4, n).astype(float)
        wbar = rng.integers(0, 3, n).astype(float)
        f = int(rng.integers(1, n + 1))
        got = select_outliers(xbar, wbar, f).tolist()
        assert got == top_f_bruteforce(xbar * wbar, f)


def test_build_plan_examples():
    plan = build_plan([10.0, 1.0, 2.0], [0, 2])
    assert np.array_equal(plan.m, [5.0, 1.0, 1.0])
    single = build_plan([10.0, 1.0, 2.0], [0])
    assert single.is_identity
    flat = build_plan([3.0, 3.0, 1.0], [0, 1])
    assert np.array_equal(flat.m, np.ones(3))


def test_build_plan_errors():
    with pytest.raises(DegenerateChannelError):
        build_plan([0.0, 1.0], [0, 1])
    with pytest.raises(ValueError):
        build_plan([1.0, 2.0], [1, 0])


def test_split_weight_example():
    plan = SmoothingPlan(np.array([5.0, 1.0, 1.0]), np.array([0]), 1)
    split = split_weight([[1.0, 2.0, 3.0]], plan)
    assert np.array_equal(split.ws + split.wo, [[5.0, 2.0, 3.0]])
    assert np.array_equal(split.wo, [[5.0, 0.0, 0.0]])
    assert np.array_equal(split.ws, [[0.0, 2.0, 3.0]])


def test_split_weight_zero_outlier_columns():
    plan = SmoothingPlan(np.ones(3), np.array([1, 2]), 2)
    split = split_weight([[1.0, 0.0, 0.0]], plan)
    assert np.array_equal(split.wo, np.zeros((1, 3)))


def _outlier_data(rng, n=32, tokens=256):
    w = rng.standard_normal((24, n))
    x = rng.standard_normal((n, tokens))
    x[rng.choice(n, 3, replace=False)] *= 50.0
    return w, x


def test_smoothing_preserves_product(rng):
    for _ in range(20):
        w, x = _outlier_data(rng)
        plan = plan_from_data(w, x, 8)
        split = split_weight(w, plan)
        wm = scale_cols(w, plan.m)
        assert np.array_equal(split.ws + split.wo, wm)
        ref = w @ x
        assert fro_norm(ref - wm @ smooth_activations(x, plan)) <= 1e-12 * fro_norm(ref)


def test_smoothing_never_grows_range(rng):
    for _ in range(20):
        w, x = _outlier_data(rng)
        plan = plan_from_data(w, x, 8)
        assert np.all(plan.m >= 1.0)
        before = np.max(np.abs(x), axis=1)
        after = np.max(np.abs(smooth_activations(x, plan)), axis=1)
        assert np.all(after <= before)
        assert np.max(after) < np.max(before)


def test_identity_plan_passthrough(rng):
    x = rng.standard_normal((5, 7))
    assert np.array_equal(smooth_activations(x, SmoothingPlan.identity(5)), x)
