import numpy as np
import pytest
import torch

from priot.dataio import load_bundled, rotate_dataset
from priot.floatref import (FloatModel, float_accuracy, float_input, float_predict, pretrain,
                            quantize_array, quantize_weights)
from priot.layers import tiny_cnn
from priot.network import IntegerNetwork


def test_quantize_array_examples():
    q, scale = quantize_array(np.array([0.5, -0.25, 0.0, 0.001]))
    assert q.tolist() == [127, -64, 0, 0]
    assert scale == pytest.approx(254.0)
    with pytest.raises(ValueError):
        quantize_array(np.zeros(3))


def test_quantize_error_bound():
    rng = np.random.default_rng(0)
    w = rng.normal(size=500)
    q, scale = quantize_array(w)
    peak = np.abs(w).max()
    assert np.abs(q / scale - w).max() <= peak / 127 / 2 + 1e-12


def test_float_input_range():
    x = float_input(np.array([[[0, 128, 255]]], np.uint8))
    assert x.shape == (1, 1, 1, 3)
    assert x.flatten().tolist() == pytest.approx([-1.0, 0.0, 127 / 128])


def test_untrained_model_is_near_chance():
    test = load_bundled("test")
    model, acc = pretrain(tiny_cnn(), load_bundled("train"), test, epochs=0, seed=0)
    assert 0.05 <= acc <= 0.2
    assert acc == float_accuracy(model, test)


def test_fixture_agrees_with_its_quantized_self(fixture_ckpt):
    """Integer inference of the fixture is a usable classifier on held-out data."""
    test = load_bundled("test")
    net = IntegerNetwork(fixture_ckpt.spec, fixture_ckpt.weights, fixture_ckpt.scales)
    assert net.accuracy(test.to_int8(), test.labels) > 0.9
    rot = rotate_dataset(test, 30)
    assert abs(net.accuracy(rot.to_int8(), rot.labels) - 0.8076) < 0.04


def test_float_and_integer_argmax_agree(fixture_ckpt):
    torch.manual_seed(0)
    model = FloatModel(tiny_cnn())
    # no biases and positively homogeneous layers: with the int8 weights loaded as
    # floats the float net differs from the integer one only by requantization
    with torch.no_grad():
        params = [m.weight for m in model.net if hasattr(m, "weight")]
        for p, w in zip(params, fixture_ckpt.weights):
            p.copy_(torch.from_numpy(w.astype(np.float32)))
    test = load_bundled("test")
    fp = float_predict(model, test.images)
    net = IntegerNetwork(fixture_ckpt.spec, fixture_ckpt.weights, fixture_ckpt.scales)
    agree = (fp == net.predict(test.to_int8())).mean()
    assert agree >= 0.9


def test_quantize_weights_builds_checkpoint():
    model = FloatModel(tiny_cnn())
    ck = quantize_weights(model, {"x": 1})
    assert ck.scales is None and ck.metadata["x"] == 1
    assert all(np.abs(w).max() == 127 for w in ck.weights)
