"""scikit-learn style wrappers: ``fit`` runs on-device style transfer
training from a pre-trained checkpoint, ``predict`` runs integer inference.

>>> clf = IntegerTransferClassifier(checkpoint="model.ckpt", method="priot", epochs=5)
>>> clf.fit(X_rot, y_rot).score(X_test, y_test)       # doctest: +SKIP
"""
from os import PathLike

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import Checkpoint, load_checkpoint, rotate, to_int8_input
from .network import IntegerNetwork
from .scaling import ScaleSet
from .train import TrainerConfig, run_experiment


def check_int8_input(X, input_shape):
    """Validate integer model input and reshape it to ``(N,) + input_shape``.

    Accepts int8 data, or any integer array whose values already lie in
    [-128, 127].  Floating-point input is refused rather than silently cast.
    """
    X = np.asarray(X)
    if X.dtype.kind not in "iu":
        raise ValueError(f"expected integer input, got dtype {X.dtype}")
    if X.size and (X.min() < -128 or X.max() > 127):
        raise ValueError("input values fall outside the int8 range; "
                         "map uint8 pixels with Int8InputQuantizer first")
    per_sample = int(np.prod(input_shape))
    if X.ndim == 0 or X.size % per_sample or (X.ndim > 1 and np.prod(X.shape[1:]) != per_sample):
        raise ValueError(f"cannot view input of shape {X.shape} as (N, {input_shape})")
    return X.astype(np.int8).reshape((-1,) + tuple(input_shape))


def check_labels(y, n_samples, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu" or (y.size and (y.min() < 0 or y.max() >= n_classes)):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return y.astype(np.int64)


def _as_checkpoint(ckpt):
    if isinstance(ckpt, Checkpoint):
        return ckpt
    if isinstance(ckpt, (str, PathLike)):
        return load_checkpoint(ckpt)
    raise TypeError("checkpoint must be a Checkpoint or a path")


class RotationTransformer(TransformerMixin, BaseEstimator):
    """Rotate uint8 images ``(N, H, W)`` by a fixed angle in degrees."""

    def __init__(self, angle=0.0):
        self.angle = angle

    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True  # stateless

    def transform(self, X):
        X = np.asarray(X)
        if X.dtype != np.uint8 or X.ndim != 3:
            raise ValueError("expected uint8 images shaped (N, H, W)")
        return rotate(X, self.angle)


class Int8InputQuantizer(TransformerMixin, BaseEstimator):
    """uint8 pixels -> int8 ``(N, 1, H, W)`` by subtracting 128."""

    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True  # stateless

    def transform(self, X):
        X = np.asarray(X)
        if X.dtype != np.uint8 or X.ndim != 3:
            raise ValueError("expected uint8 images shaped (N, H, W)")
        return to_int8_input(X)


class IntegerTransferClassifier(ClassifierMixin, BaseEstimator):
    """Integer-only transfer learning on top of a pre-trained checkpoint.

    Parameters mirror :class:`priot.train.TrainerConfig`; ``checkpoint`` is
    a :class:`~priot.dataio.Checkpoint` or a path to one.

    Fitted attributes: ``checkpoint_`` (best model), ``result_`` (full run
    record), ``history_`` (per-epoch metrics), ``classes_``.
    """

    def __init__(self, checkpoint=None, method="priot", epochs=30, threshold=None,
                 pruning_rate=0.9, selection="random", seed=0, shuffle_seed=0, rounding="nearest",
                 weight_lr_shift=TrainerConfig.weight_lr_shift,
                 score_lr_shift=TrainerConfig.score_lr_shift,
                 loss=TrainerConfig.loss, softmax_bits=TrainerConfig.softmax_bits):
        self.checkpoint = checkpoint
        self.method = method
        self.epochs = epochs
        self.threshold = threshold
        self.pruning_rate = pruning_rate
        self.selection = selection
        self.seed = seed
        self.shuffle_seed = shuffle_seed
        self.rounding = rounding
        self.weight_lr_shift = weight_lr_shift
        self.score_lr_shift = score_lr_shift
        self.loss = loss
        self.softmax_bits = softmax_bits

    def _config(self):
        return TrainerConfig(method=self.method, epochs=self.epochs, threshold=self.threshold,
                             pruning_rate=self.pruning_rate, selection=self.selection,
                             seed=self.seed, shuffle_seed=self.shuffle_seed, rounding=self.rounding,
                             weight_lr_shift=self.weight_lr_shift,
                             score_lr_shift=self.score_lr_shift, loss=self.loss,
                             softmax_bits=self.softmax_bits)

    def fit(self, X, y, eval_set=None, callback=None):
        """Train; ``eval_set=(X_test, y_test)`` adds test accuracy to the history."""
        if self.checkpoint is None:
            raise ValueError("a pre-trained checkpoint is required")
        ckpt = _as_checkpoint(self.checkpoint)
        spec = ckpt.spec
        cfg = self._config()
        X = check_int8_input(X, spec.input_shape)
        y = check_labels(y, len(X), spec.n_classes)
        X_test = y_test = None
        if eval_set is not None:
            X_test = check_int8_input(eval_set[0], spec.input_shape)
            y_test = check_labels(eval_set[1], len(X_test), spec.n_classes)
        self.result_ = run_experiment(cfg, ckpt, X, y, X_test, y_test, callback)
        self.history_ = self.result_.history
        self.checkpoint_ = self.result_.best_checkpoint
        self.classes_ = np.arange(spec.n_classes)
        self.n_features_in_ = int(np.prod(spec.input_shape))
        return self

    def _network(self):
        check_is_fitted(self, "checkpoint_")
        ck = self.checkpoint_
        mode = "dynamic" if self.method == "niti_dynamic" else "static"
        scales = ck.scales.with_mode(mode) if ck.scales is not None else ScaleSet.dynamic(len(ck.weights))
        masks = None if ck.scores is None else [s.mask() for s in ck.scores]
        return IntegerNetwork(ck.spec, ck.weights, scales, self.rounding), masks

    def decision_function(self, X):
        """int8 logits."""
        net, masks = self._network()
        return net.decision_function(check_int8_input(X, net.spec.input_shape), masks)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]
