"""Quantized forward/backward passes of a whole :class:`ModelSpec`."""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .intops import ShapeError, apply_mask, as_acc32, requantize
from .scaling import ScaleSet


@dataclass
class ForwardCache:
    inputs: list                 # activation entering each layer
    pool_indices: dict           # layer index -> argmax indices
    logits: np.ndarray


@dataclass
class Gradients:
    weight: list = field(default_factory=list)   # dW accumulators per param layer
    score: list = field(default_factory=list)    # W * dW accumulators per param layer


def _per_sample(shift, ndim):
    """Reshape a per-sample shift vector so it broadcasts over a batch."""
    if np.ndim(shift) == 0:
        return shift
    return np.asarray(shift).reshape((-1,) + (1,) * (ndim - 1))


class IntegerNetwork:
    """int8 network with frozen architecture and per-layer shift bookkeeping.

    ``weights`` holds one int8 array per parameterised layer.  ``scales``
    defaults to a dynamic :class:`ScaleSet`.  ``loss`` selects the integer
    loss gradient (see :func:`priot.layers.loss_backward`).
    """

    def __init__(self, spec, weights, scales=None, rounding="nearest", rng=None,
                 loss="linear", softmax_bits=L.SOFTMAX_FRAC_BITS):
        self.spec = spec
        self.weights = [np.ascontiguousarray(w, dtype=np.int8) for w in weights]
        if [w.shape for w in self.weights] != [tuple(s) for s in spec.weight_shapes]:
            raise ShapeError("weight shapes do not match the model spec")
        self.n_param_layers = len(self.weights)
        self.scales = scales if scales is not None else ScaleSet.dynamic(self.n_param_layers)
        self.rounding = rounding
        self.rng = np.random.default_rng(rng)
        self.loss = loss
        self.softmax_bits = softmax_bits
        # layer index -> param index
        self._pidx = {li: p for p, li in enumerate(spec.param_layers)}

    def with_scales(self, scales):
        return IntegerNetwork(self.spec, self.weights, scales, self.rounding, self.rng,
                              self.loss, self.softmax_bits)

    def _requant(self, acc, kind, p, record):
        axis = tuple(range(1, acc.ndim)) if (self.scales.mode == "dynamic" and len(acc) > 1) else None
        shift = self.scales.shift(kind, p, acc, axis=axis)
        if record is not None and acc.any():
            for s in np.atleast_1d(shift):
                record.record(p, kind, s)
        return requantize(acc, _per_sample(shift, acc.ndim), self.rounding, self.rng)

    def forward(self, x, masks=None, record=None):
        """Run a batch through the network.

        ``masks`` optionally gives one boolean array per parameterised layer;
        masked-out weights are treated as zero for this pass only.
        ``record`` is a :class:`~priot.scaling.ScaleHistogram` to log shifts.
        """
        x = np.asarray(x, dtype=np.int8)
        if x.shape[1:] != self.spec.input_shape:
            x = x.reshape((-1,) + self.spec.input_shape)
        inputs, pool_idx = [], {}
        for li, layer in enumerate(self.spec.layers):
            inputs.append(x)
            if layer.has_params:
                p = self._pidx[li]
                w = self.weights[p]
                if masks is not None and masks[p] is not None:
                    w = apply_mask(w, masks[p])
                if layer.kind == "conv2d":
                    acc = L.conv2d_acc(x, w, layer.stride)
                else:
                    acc = L.fc_acc(x, w)
                x = self._requant(acc, "fwd", p, record)
            elif layer.kind == "relu":
                x = L.relu_fwd(x)
            elif layer.kind == "maxpool2d":
                x, pool_idx[li] = L.maxpool2d_fwd(x, layer.window)
            elif layer.kind == "flatten":
                x = x.reshape(len(x), -1)
        return ForwardCache(inputs, pool_idx, x)

    def backward(self, cache, labels, record=None, weight_grads=True,
                 score_grads=False, score_coords=None):
        """Back-propagate the integer loss gradient.

        Input gradients always use the unmasked weights.  Returns the
        unrequantized weight-gradient and/or score-gradient accumulators.
        ``score_coords`` (per param layer, flat indices or None) restricts the
        score gradient to those positions; the result is then a 1-D array.
        """
        delta = L.loss_backward(cache.logits, labels, self.loss, self.softmax_bits)
        grads = Gradients([None] * self.n_param_layers, [None] * self.n_param_layers)
        first_param = self.spec.param_layers[0] if self.spec.param_layers else -1
        for li in reversed(range(len(self.spec.layers))):
            layer = self.spec.layers[li]
            x = cache.inputs[li]
            if layer.has_params:
                p = self._pidx[li]
                w = self.weights[p]
                if layer.kind == "conv2d":
                    dw = L.conv2d_weight_grad(delta, x, layer.kernel, layer.stride)
                else:
                    dw = L.fc_weight_grad(delta, x)
                if weight_grads:
                    grads.weight[p] = dw
                    if record is not None and dw.any():
                        record.record(p, "param_grad", self.scales.shift("param_grad", p, dw))
                if score_grads:
                    coords = None if score_coords is None else score_coords[p]
                    if coords is None:
                        ds = as_acc32(w.astype(np.int64) * dw)
                    else:
                        ds = as_acc32(w.ravel()[coords].astype(np.int64) * dw.ravel()[coords])
                    grads.score[p] = ds
                    if record is not None and ds.any():
                        record.record(p, "score_grad", self.scales.shift("score_grad", p, ds))
                if li == first_param:
                    break
                if layer.kind == "conv2d":
                    acc = L.conv2d_input_grad_acc(delta, w, x.shape, layer.stride)
                else:
                    acc = L.fc_input_grad_acc(delta, w)
                delta = self._requant(acc, "in_grad", p, record)
            elif layer.kind == "relu":
                delta = L.relu_bwd(delta, x)
            elif layer.kind == "maxpool2d":
                delta = L.maxpool2d_bwd(delta, cache.pool_indices[li], x.shape, layer.window)
            elif layer.kind == "flatten":
                delta = delta.reshape(x.shape)
        return grads

    def decision_function(self, X, masks=None, batch_size=256):
        """int8 logits for every row of ``X``."""
        X = np.asarray(X, dtype=np.int8)
        out = [self.forward(X[i:i + batch_size], masks).logits
               for i in range(0, len(X), batch_size)]
        if not out:
            return np.zeros((0, self.spec.n_classes), dtype=np.int8)
        return np.concatenate(out)

    def predict(self, X, masks=None, batch_size=256):
        return self.decision_function(X, masks, batch_size).argmax(axis=1)

    def accuracy(self, X, y, masks=None, batch_size=256):
        if len(X) == 0:
            return 0.0
        return float((self.predict(X, masks, batch_size) == np.asarray(y)).mean())
