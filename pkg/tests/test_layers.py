import numpy as np
import pytest

from priot import layers as L
from priot.intops import ShapeError


def test_tiny_cnn_shapes():
    spec = L.tiny_cnn()
    shapes = spec.shapes()
    assert shapes[0] == (1, 28, 28)
    assert shapes[3] == (8, 13, 13)
    assert shapes[6] == (16, 5, 5)      # 11x11 pooled with floor
    assert shapes[7] == (400,)
    assert shapes[-1] == (10,)
    assert spec.weight_shapes == [(8, 1, 3, 3), (16, 8, 3, 3), (64, 400), (10, 64)]
    assert spec.n_weights == 27464
    assert spec.layer_names() == ["conv2d1", "conv2d2", "fc1", "fc2"]
    assert L.ModelSpec.from_dict(spec.to_dict()) == spec


def test_spec_rejects_broken_chains():
    with pytest.raises(ShapeError):
        L.ModelSpec(layers=(L.Conv2d(1, 4, 3), L.Flatten(), L.Linear(99, 10)))
    with pytest.raises(ShapeError):
        L.ModelSpec(layers=(L.Flatten(), L.Linear(784, 7)))


def test_maxpool_examples():
    out, idx = L.maxpool2d_fwd(np.array([[[[1, 2], [3, 4]]]], np.int8))
    assert out.tolist() == [[[[4]]]] and idx.tolist() == [[[[3]]]]
    out, idx = L.maxpool2d_fwd(np.full((1, 1, 4, 4), 7, np.int8))
    assert (idx == 0).all() and (out == 7).all()


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[[1, 9], [3, 4]]]], np.int8)
    _, idx = L.maxpool2d_fwd(x)
    dx = L.maxpool2d_bwd(np.array([[[[5]]]], np.int8), idx, x.shape)
    assert dx.tolist() == [[[[0, 5], [0, 0]]]]


def test_relu():
    x = np.array([-3, 0, 4], np.int8)
    assert L.relu_fwd(x).tolist() == [0, 0, 4]
    assert L.relu_bwd(np.array([1, 2, 3], np.int8), x).tolist() == [0, 0, 3]


def test_linear_loss_examples():
    assert L.loss_backward_linear(np.array([[10, 20]]), [1]).tolist() == [[10, -107]]
    z = L.loss_backward_linear(np.zeros((1, 10), np.int8), [0])
    assert z.tolist() == [[-127] + [0] * 9]
    confident = np.full((1, 10), -128)
    confident[0, 3] = 127
    d = L.loss_backward_linear(confident, [3])
    assert d[0, 3] == 0 and (np.delete(d[0], 3) == -128).all()


def test_loss_argmin_is_label_for_uniform_logits():
    for kind in L.LOSSES:
        for label in range(10):
            d = L.loss_backward(np.full((1, 10), 17), [label], kind)
            assert d[0].argmin() == label
            assert (np.delete(d[0], label) > d[0, label]).all()


def test_loss_label_errors():
    with pytest.raises(ValueError):
        L.loss_backward_linear(np.zeros((1, 10)), [10])
    with pytest.raises(ShapeError):
        L.loss_backward_linear(np.zeros((2, 10)), [1])
    with pytest.raises(ValueError):
        L.loss_backward(np.zeros((1, 10)), [1], "hinge")


def test_softmax_q15_properties():
    rng = np.random.default_rng(0)
    logits = rng.integers(-128, 128, size=(500, 10))
    for bits in range(5):
        p = L.softmax_q15(logits, bits)
        assert (p >= 0).all()
        # floor division loses at most one unit per class
        assert (np.abs(p.sum(axis=1) - 32768) <= 10).all()
        assert (p.argmax(axis=1) == logits.argmax(axis=1)).all()
    # equal logits give equal probabilities
    assert (L.softmax_q15(np.zeros((1, 4))) == 8192).all()
    # one doubling step
    p = L.softmax_q15(np.array([[4, 0]]), 2)
    assert abs(p[0, 0] - 2 * p[0, 1]) <= 1


def test_softmax_loss_confident_correct_is_zero():
    logits = np.full((1, 10), -128)
    logits[0, 2] = 127
    assert not L.loss_backward_softmax(logits, [2]).any()


def test_saturated_count():
    assert L.saturated_count(np.array([127, 126, -128, 127])) == 2
