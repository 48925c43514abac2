import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aser.quant import QuantizedTensor, QuantSpec, dequantize, fake_quant, from_parts, quantize
from aser.tensor import ShapeError

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
matrices = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite)
bits = st.integers(2, 16)
axes = st.sampled_from(["per_row", "per_col"])


def test_on_grid_row():
    t = quantize([[0.0, 1.0, -1.0]], QuantSpec(4))
    assert np.allclose(t.scales, [1 / 7])
    assert np.array_equal(t.q, [[0, 7, -7]])
    assert np.allclose(dequantize(t), [[0.0, 1.0, -1.0]], rtol=0, atol=1e-16)


def test_three_bit_row():
    t = quantize([[1.0, 0.26]], QuantSpec(3))
    assert t.scales[0] == 1 / 3
    assert np.array_equal(t.q, [[3, 1]])
    assert np.allclose(dequantize(t), [[1.0, 1 / 3]], rtol=1e-15)


def test_zero_row():
    t = quantize(np.zeros((1, 4)), QuantSpec(4))
    assert t.scales[0] == 0.0
    assert np.array_equal(t.q, np.zeros((1, 4)))
    assert np.array_equal(dequantize(t), np.zeros((1, 4)))


def test_single_multiply():
    t = from_parts([[7.0]], [1 / 7], QuantSpec(4))
    assert abs(dequantize(t)[0, 0] - 1.0) <= np.spacing(1.0)


def test_per_col_integer_column_unchanged():
    x = np.arange(-127.0, 128.0).reshape(-1, 1)
    assert np.array_equal(fake_quant(x, QuantSpec(8, "per_col")), x)


def test_per_row_vs_per_col_scale_count():
    a = np.arange(6.0).reshape(2, 3) + 1
    assert quantize(a, QuantSpec(4, "per_row")).scales.shape == (2,)
    assert quantize(a, QuantSpec(4, "per_col")).scales.shape == (3,)


def test_ties_round_to_even():
    # 0.5 * scale lands exactly halfway between grid points 0 and 1
    t = quantize([[7.0, 0.5, 1.5, 2.5]], QuantSpec(4))
    assert np.array_equal(t.q, [[7, 0, 2, 2]])


def test_spec_validation():
    for bad in (1, 17, 4.0):
        with pytest.raises(ValueError):
            QuantSpec(bad)
    with pytest.raises(ValueError):
        QuantSpec(4, "per_block")
    with pytest.raises(ShapeError):
        QuantizedTensor(np.zeros((2, 2)), np.zeros(3), QuantSpec(4))


def test_from_parts_rejects_off_grid():
    with pytest.raises(ValueError):
        from_parts([[0.5]], [1.0], QuantSpec(4))
    with pytest.raises(ValueError):
        from_parts([[8.0]], [1.0], QuantSpec(4))


@settings(max_examples=300, deadline=None)
@given(matrices, bits, axes)
def test_error_bound_and_integrality(a, b, axis):
    spec = QuantSpec(b, axis)
    t = quantize(a, spec)
    assert np.array_equal(t.q, np.rint(t.q))
    assert np.all(np.abs(t.q) <= spec.qmax)
    half = 0.5 * (t.scales[:, None] if axis == "per_row" else t.scales[None, :])
    err = np.abs(dequantize(t) - a)
    assert np.all(err <= half * (1 + 1e-12) + 1e-300)


@settings(max_examples=300, deadline=None)
@given(matrices, bits, axes)
def test_idempotent(a, b, axis):
    spec = QuantSpec(b, axis)
    once = fake_quant(a, spec)
    assert np.allclose(fake_quant(once, spec), once, rtol=1e-12, atol=0)


@settings(max_examples=100, deadline=None)
@given(matrices, axes)
def test_error_shrinks_with_bits(a, axis):
    errs = [np.max(np.abs(fake_quant(a, QuantSpec(b, axis)) - a)) for b in (2, 4, 8, 16)]
    bounds = [np.max(np.abs(a)) / (2 ** (b - 1) - 1) / 2 for b in (2, 4, 8, 16)]
    for e, bound in zip(errs, bounds):
        assert e <= bound * (1 + 1e-12)
    assert errs[-1] <= errs[0] + 1e-300


def test_per_row_column_permutation_invariant(rng):
    a = rng.standard_normal((6, 9))
    perm = rng.permutation(9)
    spec = QuantSpec(4)
    assert np.array_equal(fake_quant(a[:, perm], spec), fake_quant(a, spec)[:, perm])
