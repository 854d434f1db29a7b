"""Scale factors: dynamic per-tensor shifts, static calibration, bookkeeping.

A scale factor is the number of bits a 32-bit accumulator is shifted right
before it is saturated to int8.  Each parameterised layer owns one shift per
pass kind:

``fwd``         forward output
``in_grad``     gradient w.r.t. the layer input
``param_grad``  weight gradient (weight-update trainers)
``score_grad``  score gradient, weight-scaled (score trainers)
``bias``        reserved; no layer in this package has a bias
"""
from collections import Counter

import numpy as np

from .intops import MAX_SHIFT

PASS_KINDS = ("fwd", "in_grad", "param_grad", "score_grad", "bias")
CALIBRATED_KINDS = ("fwd", "in_grad", "param_grad", "score_grad")


class FrozenScaleError(RuntimeError):
    """Attempt to change a static ScaleSet after calibration."""


class CalibrationError(ValueError):
    pass


def dynamic_scale(acc, axis=None):
    """Smallest shift that brings ``max|acc|`` into the int8 range.

    Equivalent to ``max(0, bit_length(max|acc|) - 7)``.  With ``axis`` set,
    one shift is returned per slice (e.g. per sample of a batch).
    """
    acc = np.asarray(acc)
    if acc.size == 0:
        raise ValueError("dynamic_scale of an empty tensor")
    peak = np.abs(acc.astype(np.int64)).max(axis=axis)
    if axis is None:
        return max(0, int(peak).bit_length() - 7)
    bits = (peak[..., None] >= _POW2).sum(axis=-1)
    return np.maximum(bits - 7, 0).astype(np.int64)


_POW2 = np.int64(1) << np.arange(40, dtype=np.int64)


class ScaleSet:
    """Per-layer shift amounts for every pass kind.

    In ``static`` mode the shifts are written once (by :func:`calibrate` or
    when loading a checkpoint) and then frozen; any later write raises
    :class:`FrozenScaleError`.  In ``dynamic`` mode :meth:`shift` derives the
    shift from the accumulator it is asked about.
    """

    def __init__(self, n_layers, mode="static", shifts=None):
        if mode not in ("static", "dynamic"):
            raise ValueError(f"unknown scale mode {mode!r}")
        self.n_layers = n_layers
        self.mode = mode
        self._shifts = {k: [0] * n_layers for k in PASS_KINDS}
        self._frozen = False
        if shifts is not None:
            for kind, values in shifts.items():
                for layer, value in enumerate(values):
                    self.set(kind, layer, value)
            if mode == "static":
                self.freeze()

    @classmethod
    def dynamic(cls, n_layers):
        return cls(n_layers, mode="dynamic")

    @property
    def frozen(self):
        return self._frozen

    def freeze(self):
        self._frozen = True
        return self

    def set(self, kind, layer, value):
        if self._frozen:
            raise FrozenScaleError(f"static scale {kind}[{layer}] is frozen")
        value = int(value)
        if not 0 <= value <= MAX_SHIFT:
            raise ValueError(f"shift {value} outside [0, {MAX_SHIFT}]")
        self._shifts[kind][layer] = value

    def get(self, kind, layer):
        return self._shifts[kind][layer]

    def shift(self, kind, layer, acc=None, axis=None):
        """Shift to apply to ``acc`` for pass ``kind`` of ``layer``."""
        if self.mode == "static":
            return self._shifts[kind][layer]
        return dynamic_scale(acc, axis=axis)

    def as_dict(self):
        return {k: list(v) for k, v in self._shifts.items()}

    def with_mode(self, mode):
        """Copy of this set in ``mode`` (static copies are frozen)."""
        return ScaleSet(self.n_layers, mode=mode, shifts=self.as_dict())

    def __eq__(self, other):
        return (isinstance(other, ScaleSet) and self.mode == other.mode
                and self.as_dict() == other.as_dict())

    def __repr__(self):
        return f"ScaleSet(mode={self.mode!r}, shifts={self.as_dict()!r})"

    def to_table(self, layer_names=None):
        names = layer_names or [f"layer{i}" for i in range(self.n_layers)]
        width = max(len(n) for n in names + ["layer"])
        head = "layer".ljust(width) + "".join(k.rjust(12) for k in PASS_KINDS)
        rows = [head]
        for i, name in enumerate(names):
            rows.append(name.ljust(width)
                        + "".join(str(self._shifts[k][i]).rjust(12) for k in PASS_KINDS))
        return "\n".join(rows)


class ScaleHistogram:
    """Counts of the dynamic shifts observed per (layer, pass kind).

    All-zero accumulators carry no scale information and are not recorded.
    """

    def __init__(self, n_layers):
        self.n_layers = n_layers
        self.counts = {(layer, kind): Counter()
                       for layer in range(n_layers) for kind in CALIBRATED_KINDS}
        self.passes = 0

    def record(self, layer, kind, shift):
        self.counts[(layer, kind)][int(shift)] += 1

    def mode(self, layer, kind):
        """Most frequent shift; ties go to the larger shift."""
        counts = self.counts[(layer, kind)]
        if not counts:
            return 0
        return max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0]

    def to_scale_set(self):
        scales = ScaleSet(self.n_layers, mode="static")
        for (layer, kind) in self.counts:
            scales.set(kind, layer, self.mode(layer, kind))
        return scales.freeze()


def calibrate(network, X, y, n_samples=256):
    """Static scales from the most frequent dynamic shift over calibration data.

    Runs quantized forward and backward passes of ``network`` in dynamic mode
    on the first ``n_samples`` items of ``(X, y)``, one sample per pass, and
    returns a frozen static :class:`ScaleSet` whose entries are the per-layer
    modes.  The network's own scales are left untouched.
    """
    X = np.asarray(X)
    if len(X) == 0 or n_samples < 1:
        raise CalibrationError("calibration set is empty")
    n = min(n_samples, len(X))
    hist = ScaleHistogram(network.n_param_layers)
    probe = network.with_scales(ScaleSet.dynamic(network.n_param_layers))
    for i in range(n):
        cache = probe.forward(X[i:i + 1], record=hist)
        probe.backward(cache, np.asarray(y[i:i + 1]), record=hist, score_grads=True)
        hist.passes += 1
    return hist.to_scale_set()
