"""Layer geometry and integer kernels for the tiny CNN.

All kernels are batch-first: activations are ``(N, C, H, W)`` for spatial
layers and ``(N, F)`` after flattening.  Kernels that multiply return
32-bit accumulators; requantization is left to the caller so the shift can be
static or derived from the accumulator itself.
"""
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .intops import INT8_MAX, ShapeError, as_acc32, clamp_i8, requantize

LOSS_GAIN = 127


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    kind = "conv2d"
    has_params = True

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    kind = "fc"
    has_params = True

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features)

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"fc expects ({self.in_features},), got {shape}")
        return (self.out_features,)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"
    has_params = False

    def output_shape(self, shape):
        return shape


@dataclass(frozen=True)
class MaxPool2d:
    window: int = 2
    kind = "maxpool2d"
    has_params = False

    def output_shape(self, shape):
        c, h, w = shape
        # trailing rows/columns that do not fill a window are dropped
        return (c, h // self.window, w // self.window)


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"
    has_params = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


_LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, Linear, ReLU, MaxPool2d, Flatten)}


def layer_from_dict(d):
    d = dict(d)
    return _LAYER_TYPES[d.pop("kind")](**d)


def layer_to_dict(layer):
    return {"kind": layer.kind, **asdict(layer)}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple = (1, 28, 28)
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = self.shapes()
        if any(d <= 0 for s in shapes for d in s):
            raise ShapeError(f"non-positive layer output in {shapes}")
        if self.layers and shapes[-1] != (self.n_classes,):
            raise ShapeError(f"final output {shapes[-1]} != ({self.n_classes},)")

    def shapes(self):
        """Activation shape before the first layer and after every layer."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def param_layers(self):
        """Indices (into ``layers``) of the layers that carry weights."""
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    @property
    def weight_shapes(self):
        return [self.layers[i].weight_shape for i in self.param_layers]

    @property
    def n_weights(self):
        return sum(int(np.prod(s)) for s in self.weight_shapes)

    def layer_names(self):
        names, counts = [], {}
        for i in self.param_layers:
            kind = self.layers[i].kind
            counts[kind] = counts.get(kind, 0) + 1
            names.append(f"{kind}{counts[kind]}")
        return names

    def to_dict(self):
        return {"layers": [layer_to_dict(l) for l in self.layers],
                "input_shape": list(self.input_shape),
                "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=tuple(layer_from_dict(l) for l in d["layers"]),
                   input_shape=tuple(d["input_shape"]), n_classes=d["n_classes"])


def tiny_cnn():
    """Two conv + two fully connected layers, no biases, 27,464 weights."""
    return ModelSpec(layers=(
        Conv2d(1, 8, 3), ReLU(), MaxPool2d(2),
        Conv2d(8, 16, 3), ReLU(), MaxPool2d(2),
        Flatten(),
        Linear(400, 64), ReLU(),
        Linear(64, 10),
    ))


# --------------------------------------------------------------------------
# convolution


def _windows(x, k, stride):
    """(N, C, Ho, Wo, k, k) view of every receptive field."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_acc(x, w, stride=1):
    x, w = np.asarray(x), np.asarray(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes do not chain: x{x.shape} w{w.shape}")
    n, c = x.shape[:2]
    o, _, k, _ = w.shape
    cols = _windows(x.astype(np.int64), k, stride)
    ho, wo = cols.shape[2:4]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    acc = cols @ w.reshape(o, -1).T.astype(np.int64)
    return as_acc32(np.ascontiguousarray(acc.transpose(0, 3, 1, 2)))


def conv2d_input_grad_acc(dy, w, in_shape, stride=1):
    """Accumulator of W^T dy scattered back onto the input grid."""
    dy, w = np.asarray(dy), np.asarray(w)
    n, o, ho, wo = dy.shape
    if w.shape[0] != o:
        raise ShapeError(f"conv2d backward: dy{dy.shape} vs w{w.shape}")
    _, c, k, _ = w.shape
    dcols = dy.transpose(0, 2, 3, 1).astype(np.int64) @ w.reshape(o, -1).astype(np.int64)
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n,) + tuple(in_shape[-3:]), dtype=np.int64)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return as_acc32(dx)


def conv2d_weight_grad(dy, x, kernel, stride=1):
    """Accumulator of dL/dW summed over batch and output positions."""
    dy, x = np.asarray(dy), np.asarray(x)
    cols = _windows(x.astype(np.int64), kernel, stride)
    if cols.shape[2:4] != dy.shape[2:4] or cols.shape[0] != dy.shape[0]:
        raise ShapeError(f"conv2d weight grad: dy{dy.shape} vs x{x.shape}")
    return as_acc32(np.tensordot(dy.astype(np.int64), cols, axes=([0, 2, 3], [0, 2, 3])))


def conv2d_fwd(x, w, shift, stride=1, rounding="nearest", rng=None):
    return requantize(conv2d_acc(x, w, stride), shift, rounding, rng)


def conv2d_bwd(dy, w, x, shift, stride=1, rounding="nearest", rng=None):
    """Return ``(dx, dW_acc)``; ``dW_acc`` is left unrequantized."""
    dx = requantize(conv2d_input_grad_acc(dy, w, np.shape(x), stride), shift, rounding, rng)
    return dx, conv2d_weight_grad(dy, x, w.shape[-1], stride)


# --------------------------------------------------------------------------
# fully connected


def fc_acc(x, w):
    x, w = np.asarray(x), np.asarray(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"fc shapes do not chain: x{x.shape} w{w.shape}")
    return as_acc32(x.astype(np.int64) @ w.T.astype(np.int64))


def fc_input_grad_acc(dy, w):
    dy, w = np.asarray(dy), np.asarray(w)
    if dy.shape[-1] != w.shape[0]:
        raise ShapeError(f"fc backward: dy{dy.shape} vs w{w.shape}")
    return as_acc32(dy.astype(np.int64) @ w.astype(np.int64))


def fc_weight_grad(dy, x):
    dy, x = np.asarray(dy), np.asarray(x)
    return as_acc32(dy.astype(np.int64).T @ x.astype(np.int64))


def fc_fwd(x, w, shift, rounding="nearest", rng=None):
    return requantize(fc_acc(x, w), shift, rounding, rng)


def fc_bwd(dy, w, x, shift, rounding="nearest", rng=None):
    dx = requantize(fc_input_grad_acc(dy, w), shift, rounding, rng)
    return dx, fc_weight_grad(dy, x)


# --------------------------------------------------------------------------
# activation, pooling, loss


def relu_fwd(x):
    return np.maximum(x, 0).astype(np.int8)


def relu_bwd(dy, x):
    dy, x = np.asarray(dy), np.asarray(x)
    if dy.shape != x.shape:
        raise ShapeError(f"relu backward: {dy.shape} vs {x.shape}")
    return np.where(x > 0, dy, 0).astype(np.int8)


def maxpool2d_fwd(x, window=2):
    """Window maxima plus the in-window flat index of each maximum.

    Ties resolve to the first element in row-major scan order.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    ho, wo = h // window, w // window
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool window {window} larger than input {x.shape}")
    blocks = (x[:, :, :ho * window, :wo * window]
              .reshape(n, c, ho, window, wo, window)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, ho, wo, window * window))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out.astype(x.dtype), idx.astype(np.int8)


def maxpool2d_bwd(dy, idx, in_shape, window=2):
    dy = np.asarray(dy)
    n, c, ho, wo = dy.shape
    if idx.shape != dy.shape:
        raise ShapeError(f"pool backward: dy{dy.shape} vs indices{idx.shape}")
    blocks = np.zeros((n, c, ho, wo, window * window), dtype=np.int8)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = np.zeros((n,) + tuple(in_shape[-3:]), dtype=np.int8)
    dx[:, :, :ho * window, :wo * window] = (blocks.reshape(n, c, ho, wo, window, window)
                                            .transpose(0, 1, 2, 4, 3, 5)
                                            .reshape(n, c, ho * window, wo * window))
    return dx


def _check_labels(logits, labels):
    logits = np.asarray(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} logits rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k), dtype=np.int64)
    onehot[np.arange(n), labels] = 1
    return logits.astype(np.int64), onehot


def loss_backward_linear(logits, labels):
    """Linear surrogate of softmax - onehot: ``clamp(logits - 127 * onehot)``."""
    logits, onehot = _check_labels(logits, labels)
    return clamp_i8(logits - LOSS_GAIN * onehot)


# 2**(f/16) in Q15 for f = 0..15; a constant table, as it would sit in ROM
_EXP2_FRAC_Q15 = np.array([32768, 34219, 35734, 37316, 38968, 40693, 42495, 44376,
                           46341, 48393, 50535, 52773, 55109, 57549, 60097, 62757],
                          dtype=np.int64)
SOFTMAX_FRAC_BITS = 2


def softmax_q15(logits, frac_bits=SOFTMAX_FRAC_BITS):
    """Base-2 integer softmax, probabilities in Q15.

    A logit step of ``2**frac_bits`` units doubles the unnormalised
    probability; ``frac_bits`` may be 0..4.
    """
    a = np.asarray(logits, dtype=np.int64)
    d = a - a.max(axis=-1, keepdims=True)
    whole = np.minimum(-(d >> frac_bits), 40)
    frac = (d & ((1 << frac_bits) - 1)) << (4 - frac_bits)
    num = _EXP2_FRAC_Q15[frac] >> whole
    return (num << 15) // num.sum(axis=-1, keepdims=True)


def loss_backward_softmax(logits, labels, frac_bits=SOFTMAX_FRAC_BITS):
    """Integer cross-entropy gradient ``round(127 * softmax) - 127 * onehot``."""
    logits, onehot = _check_labels(logits, labels)
    p = softmax_q15(logits, frac_bits)
    return clamp_i8(((LOSS_GAIN * p + (1 << 14)) >> 15) - LOSS_GAIN * onehot)


LOSSES = ("linear", "softmax")


def loss_backward(logits, labels, kind, frac_bits=SOFTMAX_FRAC_BITS):
    """Integer loss gradient w.r.t. the int8 logits.

    ``linear`` -- ``clamp(logits - 127 * onehot)``
    ``softmax`` -- base-2 integer softmax cross-entropy, see
    :func:`loss_backward_softmax`
    """
    if kind == "linear":
        return loss_backward_linear(logits, labels)
    if kind == "softmax":
        return loss_backward_softmax(logits, labels, frac_bits)
    raise ValueError(f"unknown loss {kind!r}")


def saturated_count(logits):
    """Number of output elements sitting at the +127 saturation bound."""
    return int((np.asarray(logits) >= INT8_MAX).sum())
