import numpy as np
import pytest

from priot.dataio import load_bundled
from priot.layers import tiny_cnn
from priot.network import IntegerNetwork
from priot.scaling import (CALIBRATED_KINDS, CalibrationError, FrozenScaleError, ScaleHistogram,
                           ScaleSet, calibrate, dynamic_scale)


@pytest.mark.parametrize("peak, shift", [(0, 0), (127, 0), (128, 1), (255, 1), (256, 2),
                                         (32258, 8), (2 ** 31 - 1, 24)])
def test_dynamic_scale(peak, shift):
    assert dynamic_scale(np.array([peak, -3])) == shift
    assert dynamic_scale(np.array([-peak, 3])) == shift


def test_dynamic_scale_per_sample_matches_scalar():
    rng = np.random.default_rng(0)
    acc = rng.integers(-2 ** 20, 2 ** 20, size=(16, 5, 3))
    per = dynamic_scale(acc, axis=(1, 2))
    assert per.tolist() == [dynamic_scale(a) for a in acc]


def test_dynamic_scale_then_requantize_fits():
    from priot.intops import requantize
    rng = np.random.default_rng(1)
    for _ in range(200):
        acc = rng.integers(-2 ** 30, 2 ** 30, size=7) >> rng.integers(0, 30)
        out = requantize(acc, dynamic_scale(acc)).astype(int)
        # at most one step of rounding headroom is lost to saturation
        assert np.abs(out).max() <= 128


def test_scale_set_freezes():
    s = ScaleSet(4, "static", {"fwd": [1, 2, 3, 4]})
    assert s.frozen and s.get("fwd", 2) == 3 and s.get("in_grad", 0) == 0
    with pytest.raises(FrozenScaleError):
        s.set("fwd", 0, 5)
    d = s.with_mode("dynamic")
    assert d.shift("fwd", 0, np.array([1000])) == 3
    with pytest.raises(ValueError):
        ScaleSet(1, "static", {"fwd": [40]})
    with pytest.raises(ValueError):
        ScaleSet(1, "adaptive")


def test_histogram_mode_ties_to_larger_shift():
    h = ScaleHistogram(1)
    for s in (3, 3, 5, 5, 4):
        h.record(0, "fwd", s)
    assert h.mode(0, "fwd") == 5
    assert h.mode(0, "in_grad") == 0  # nothing recorded


def test_scale_table_lists_every_layer_and_pass():
    s = ScaleSet(2, "static", {"fwd": [9, 8]})
    table = s.to_table(["a", "b"]).splitlines()
    assert len(table) == 3
    for kind in ("fwd", "in_grad", "param_grad", "score_grad", "bias"):
        assert kind in table[0]


@pytest.fixture(scope="module")
def calib_data():
    ds = load_bundled("train")
    return ds.to_int8()[:32], ds.labels[:32]


def test_calibrate_deterministic_and_frozen(fixture_ckpt, calib_data):
    net = IntegerNetwork(fixture_ckpt.spec, fixture_ckpt.weights)
    a = calibrate(net, *calib_data, n_samples=32)
    b = calibrate(net, *calib_data, n_samples=32)
    assert a == b and a.frozen and a.mode == "static"
    assert net.scales.mode == "dynamic"  # probe did not touch the network
    for kind in CALIBRATED_KINDS:
        assert all(0 <= a.get(kind, i) <= 31 for i in range(4))
    assert a.get("fwd", 0) > 0


def test_calibrate_empty_set_errors(fixture_ckpt):
    net = IntegerNetwork(fixture_ckpt.spec, fixture_ckpt.weights)
    with pytest.raises(CalibrationError):
        calibrate(net, np.zeros((0, 1, 28, 28), np.int8), np.zeros(0, int))


def test_calibration_ignores_all_zero_gradients():
    # zero weights give zero gradients everywhere below the output layer
    spec = tiny_cnn()
    weights = [np.zeros(s, np.int8) for s in spec.weight_shapes]
    net = IntegerNetwork(spec, weights)
    x = np.ones((4, 1, 28, 28), np.int8)
    s = calibrate(net, x, np.arange(4))
    assert s.get("param_grad", 0) == 0 and s.get("in_grad", 3) == 0
