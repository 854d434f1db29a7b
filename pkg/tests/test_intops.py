import numpy as np
import pytest

from priot import intops
from priot.intops import (ShapeError, apply_mask, clamp_i8, matmul_i8, requantize,
                          saturating_add_i8, saturating_sub_i8)


@pytest.mark.parametrize("acc, shift, want", [
    (-1000, 3, -125),
    (1000, 3, 125),
    (100000, 3, 127),
    (-100000, 3, -128),
    (12, 3, 2),       # 1.5 rounds away from zero
    (-12, 3, -2),
    (11, 3, 1),
    (0, 31, 0),
])
def test_requantize_examples(acc, shift, want):
    assert requantize(np.int32(acc), shift) == want


def test_requantize_shift_zero_is_identity_in_range():
    x = np.arange(-128, 128, dtype=np.int32)
    assert np.array_equal(requantize(x, 0), x.astype(np.int8))


def test_requantize_floor_rounds_down():
    assert requantize(np.array([-9, 9]), 2, "floor").tolist() == [-3, 2]


def test_requantize_per_sample_shift():
    acc = np.array([[256, 256], [256, 256]])
    out = requantize(acc, np.array([[1], [3]]))
    assert out.tolist() == [[127, 127], [32, 32]]


def test_requantize_rejects_bad_shift():
    with pytest.raises(ValueError):
        requantize(np.int32(5), -1)
    with pytest.raises(ValueError):
        requantize(np.int32(5), 32)
    with pytest.raises(ValueError):
        requantize(np.int32(5), 2, "banker")


def test_stochastic_rounding_is_seeded_and_unbiased():
    acc = np.full(20000, 5)  # 5 / 4 = 1.25
    a = requantize(acc, 2, "stochastic", rng=7)
    b = requantize(acc, 2, "stochastic", rng=7)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) == {1, 2}
    assert abs(a.mean() - 1.25) < 0.02
    with pytest.raises(ValueError):
        requantize(acc, 2, "stochastic")


def test_clamp_and_saturating_ops():
    assert clamp_i8(np.array([-300, 5, 300])).tolist() == [-128, 5, 127]
    a = np.array([120, -120, 3], dtype=np.int8)
    b = np.array([20, 20, 4], dtype=np.int8)
    assert saturating_add_i8(a, b).tolist() == [127, -100, 7]
    assert saturating_sub_i8(a, b).tolist() == [100, -128, -1]
    assert saturating_sub_i8(np.int8([-128]), np.int8([1])).tolist() == [-128]
    with pytest.raises(ShapeError):
        saturating_add_i8(a, b[:2])


def test_matmul_exact_and_shape_checked():
    a = np.full((2, 300), -128, dtype=np.int8)
    b = np.full((300, 1), -128, dtype=np.int8)
    out = matmul_i8(a, b)
    assert out.dtype == np.int32
    assert out.tolist() == [[300 * 16384]] * 2
    with pytest.raises(ShapeError):
        matmul_i8(a, a)


def test_debug_accumulators_flag(monkeypatch):
    monkeypatch.setattr(intops, "DEBUG_ACCUMULATORS", True)
    with pytest.raises(OverflowError):
        intops.as_acc32(np.array([2 ** 31]))


def test_apply_mask():
    w = np.array([[1, -2], [3, -4]], dtype=np.int8)
    m = np.array([[True, False], [False, True]])
    assert apply_mask(w, m).tolist() == [[1, 0], [0, -4]]
    assert apply_mask(w, np.ones_like(m)).tolist() == w.tolist()
    assert not apply_mask(w, np.zeros_like(m)).any()
    with pytest.raises(ShapeError):
        apply_mask(w, m[0])
