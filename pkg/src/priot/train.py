"""Integer training loops: weight-update baseline and score-based pruning.

Methods
-------
niti_static   weight updates, frozen calibrated shifts
niti_dynamic  weight updates, shifts recomputed from every accumulator
priot         frozen weights, a score per edge, threshold pruning
priot_s       frozen weights, scores on a preselected subset of edges only
"""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import Checkpoint
from .intops import MAX_SHIFT, requantize, saturating_sub_i8
from .layers import LOSSES, SOFTMAX_FRAC_BITS, saturated_count
from .network import IntegerNetwork
from .scaling import ScaleSet
from .scores import (SCORE_SIGMA, ScoreTensor, SparseScores, init_scores,
                     pruned_count, select_scored_edges, update_scores)

log = logging.getLogger(__name__)

METHODS = ("niti_static", "niti_dynamic", "priot", "priot_s")
DEFAULT_THRESHOLD = {"priot": -64, "priot_s": 0}
SELECTIONS = ("random", "weight_based")


class ConfigError(ValueError):
    pass


class ModeMismatchError(ValueError):
    """Checkpoint contents do not fit the requested training method."""


class InvariantError(AssertionError):
    """A training-time invariant (frozen weights, frozen scales...) was broken."""


@dataclass
class TrainerConfig:
    method: str = "priot"
    epochs: int = 30
    batch_size: int = 1
    threshold: int = None
    pruning_rate: float = 0.9
    selection: str = "random"
    seed: int = 0
    # sample order is tied to the data, not to the run seed
    shuffle_seed: int = 0
    rounding: str = "nearest"
    # extra right shift on top of the (calibrated or dynamic) gradient shift
    weight_lr_shift: int = 0
    score_lr_shift: int = 0
    score_sigma: float = SCORE_SIGMA
    sigma_is_variance: bool = False
    loss: str = "linear"
    softmax_bits: int = SOFTMAX_FRAC_BITS

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.batch_size != 1:
            raise ConfigError("training runs one sample per step (batch_size=1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.threshold is None and self.method in DEFAULT_THRESHOLD:
            self.threshold = DEFAULT_THRESHOLD[self.method]
        if self.threshold is not None and not -128 <= self.threshold <= 127:
            raise ConfigError(f"threshold {self.threshold} is not an int8 value")
        if not 0.0 <= self.pruning_rate < 1.0:
            raise ConfigError("pruning_rate must lie in [0, 1)")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if not 0 <= self.softmax_bits <= 4:
            raise ConfigError("softmax_bits must lie in [0, 4]")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection {self.selection!r}")
        for name in ("weight_lr_shift", "score_lr_shift"):
            if not 0 <= getattr(self, name) <= MAX_SHIFT:
                raise ConfigError(f"{name} must lie in [0, {MAX_SHIFT}]")

    @property
    def scale_mode(self):
        return "dynamic" if self.method == "niti_dynamic" else "static"

    @property
    def uses_scores(self):
        return self.method in ("priot", "priot_s")


@dataclass
class EpochMetrics:
    epoch: int
    train_acc: float
    test_acc: float
    overflow_count: int
    overflow_total: int
    pruned: list
    wall_time: float
    overflow_trace: list = field(default_factory=list, repr=False)

    @property
    def overflow_fraction(self):
        return self.overflow_count / self.overflow_total if self.overflow_total else 0.0


@dataclass
class RunResult:
    config: TrainerConfig
    history: list
    best_epoch: int
    test_acc: float
    pre_transfer_test_acc: float
    pre_transfer_train_acc: float
    best_checkpoint: Checkpoint
    layer_names: list

    @property
    def delta_pp(self):
        """Reported accuracy gain over the untouched model, in points."""
        return 100.0 * (self.test_acc - self.pre_transfer_test_acc)

    def summary(self):
        return {
            "method": self.config.method,
            "config": asdict(self.config),
            "best_epoch": self.best_epoch,
            "test_acc": self.test_acc,
            "pre_transfer_test_acc": self.pre_transfer_test_acc,
            "pre_transfer_train_acc": self.pre_transfer_train_acc,
            "delta_pp": self.delta_pp,
            "max_overflow_fraction": max((m.overflow_fraction for m in self.history), default=0.0),
        }


# --------------------------------------------------------------------------
# single steps


def _grad_shift(scales, kind, p, acc, lr_shift):
    return min(MAX_SHIFT, scales.shift(kind, p, acc) + lr_shift)


def train_step_niti(net, x, label, weight_lr_shift=0):
    """One sample of integer SGD on the weights; returns the logits."""
    cache = net.forward(x)
    grads = net.backward(cache, np.atleast_1d(label))
    for p, dw in enumerate(grads.weight):
        shift = _grad_shift(net.scales, "param_grad", p, dw, weight_lr_shift)
        step = requantize(dw, shift, net.rounding, net.rng)
        net.weights[p] = saturating_sub_i8(net.weights[p], step)
    return cache.logits


def train_step_priot(net, scores, x, label, score_lr_shift=0):
    """One sample of score training with frozen weights; returns the logits.

    Works for dense :class:`ScoreTensor` and sparse :class:`SparseScores`
    entries alike; the sparse ones only receive gradients at their coords.
    """
    masks = [s.mask() for s in scores]
    cache = net.forward(x, masks)
    coords = [s.coords if isinstance(s, SparseScores) else None for s in scores]
    grads = net.backward(cache, np.atleast_1d(label), weight_grads=False,
                         score_grads=True, score_coords=coords)
    for p, (s, ds) in enumerate(zip(scores, grads.score)):
        if ds.size == 0:
            continue
        shift = _grad_shift(net.scales, "score_grad", p, ds, score_lr_shift)
        update_scores(s, ds, shift, net.rounding, net.rng)
    return cache.logits


def overflow_monitor(logits):
    """Per-sample count of outputs at the +127 saturation bound."""
    logits = np.atleast_2d(logits)
    return [saturated_count(row) for row in logits]


# --------------------------------------------------------------------------
# footprint


def _index_bytes(size):
    return 2 if size <= (1 << 16) else 4


def estimate_footprint(spec, method, pruning_rate=None):
    """Bytes of tensors held during on-device training.

    weights
        one byte per weight
    activations
        the network input and every layer output (int8), plus one index
        byte per max-pool output; a flatten is a view and costs nothing
    errors
        one int8 gradient buffer per layer output
    method extras
        ``niti_dynamic``: one int32 buffer sized for the largest accumulator
        (the whole tensor must exist before its shift is known);
        ``priot``: one score byte per weight;
        ``priot_s``: per scored edge one score byte and a flat index of 2
        bytes (4 when a layer exceeds 65,536 weights)
    """
    if not spec.layers:
        return 0
    shapes = spec.shapes()
    weights = spec.n_weights
    activations = int(np.prod(shapes[0]))
    errors = 0
    largest_acc = 0
    for layer, out in zip(spec.layers, shapes[1:]):
        if layer.kind == "flatten":
            continue
        size = int(np.prod(out))
        activations += size
        errors += size
        if layer.kind == "maxpool2d":
            activations += size
        if layer.has_params:
            largest_acc = max(largest_acc, size, int(np.prod(layer.weight_shape)))
    total = weights + activations + errors
    if method == "niti_dynamic":
        total += 4 * largest_acc
    elif method == "priot":
        total += weights
    elif method == "priot_s":
        if pruning_rate is None:
            raise ValueError("priot_s footprint needs a pruning rate")
        from .scores import n_scored
        for shape in spec.weight_shapes:
            size = int(np.prod(shape))
            total += n_scored(size, pruning_rate) * (1 + _index_bytes(size))
    elif method != "niti_static":
        raise ValueError(f"unknown method {method!r}")
    return total


# --------------------------------------------------------------------------
# experiment


def _init_scores(cfg, spec, weights, rng):
    out = []
    for w in weights:
        if cfg.method == "priot":
            out.append(ScoreTensor(init_scores(w.shape, rng, cfg.score_sigma,
                                               cfg.sigma_is_variance), cfg.threshold))
        else:
            out.append(select_scored_edges(w, cfg.pruning_rate, cfg.selection, rng,
                                           cfg.threshold, cfg.score_sigma, cfg.sigma_is_variance))
    return out


def _check_checkpoint(cfg, ckpt):
    if not cfg.uses_scores and ckpt.scores is not None:
        raise ModeMismatchError(f"checkpoint carries scores but method is {cfg.method}")
    if cfg.uses_scores and ckpt.scores is not None:
        want = "dense" if cfg.method == "priot" else "sparse"
        if ckpt.score_kind != want:
            raise ModeMismatchError(f"checkpoint has {ckpt.score_kind} scores, {cfg.method} needs {want}")
    if cfg.scale_mode == "static" and ckpt.scales is None:
        raise ModeMismatchError("static-scale training needs a calibrated checkpoint")


def make_network(ckpt, cfg, rng=None):
    if cfg.scale_mode == "static":
        scales = ckpt.scales.with_mode("static")
    else:
        scales = ScaleSet.dynamic(len(ckpt.weights))
    weights = [w.copy() for w in ckpt.weights]
    return IntegerNetwork(ckpt.spec, weights, scales, cfg.rounding, rng, cfg.loss, cfg.softmax_bits)


def run_experiment(cfg, ckpt, X_train, y_train, X_test=None, y_test=None, callback=None,
                   inspect=None):
    """Train on ``(X_train, y_train)`` for ``cfg.epochs`` epochs, one sample per step.

    Inputs are int8 arrays shaped ``(N, C, H, W)``.  The model retained is the
    one with the highest train accuracy (earliest epoch on ties, epoch 0 being
    the state before any step); its test accuracy is the reported result.

    ``callback(metrics)`` runs after every epoch; ``inspect(epoch, weights,
    scores)`` likewise, with read-only views of the live model for external
    audits.
    """
    _check_checkpoint(cfg, ckpt)
    X_train, y_train = np.asarray(X_train, dtype=np.int8), np.asarray(y_train)
    has_test = X_test is not None
    if has_test:
        X_test, y_test = np.asarray(X_test, dtype=np.int8), np.asarray(y_test)
    init_rng, round_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(cfg.seed).spawn(2))
    order_rng = np.random.default_rng(cfg.shuffle_seed)

    net = make_network(ckpt, cfg, round_rng)
    frozen_weights = [w.tobytes() for w in net.weights]
    frozen_scales = net.scales.as_dict()
    names = ckpt.spec.layer_names()

    pre_train = net.accuracy(X_train, y_train)
    pre_test = net.accuracy(X_test, y_test) if has_test else float("nan")

    scores = None
    if cfg.uses_scores:
        if ckpt.scores is not None:
            scores = [s.copy() for s in ckpt.scores]
        else:
            scores = _init_scores(cfg, ckpt.spec, net.weights, init_rng)

    def masks():
        return None if scores is None else [s.mask() for s in scores]

    def evaluate(epoch, t0, trace):
        m = masks()
        train_acc = net.accuracy(X_train, y_train, m)
        test_acc = net.accuracy(X_test, y_test, m) if has_test else float("nan")
        pruned = [pruned_count(s) for s in scores] if scores else [0] * len(names)
        return EpochMetrics(epoch, train_acc, test_acc, int(sum(trace)),
                            len(trace) * ckpt.spec.n_classes, pruned,
                            time.perf_counter() - t0, trace)

    def snapshot():
        return ([w.copy() for w in net.weights],
                None if scores is None else [s.copy() for s in scores])

    history = [evaluate(0, time.perf_counter(), [])]
    best_epoch, best_acc, best_state = 0, history[0].train_acc, snapshot()
    if callback:
        callback(history[-1])

    n = len(y_train)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        trace = []
        for i in order_rng.permutation(n):
            x = X_train[i:i + 1]
            if scores is None:
                logits = train_step_niti(net, x, y_train[i], cfg.weight_lr_shift)
            else:
                logits = train_step_priot(net, scores, x, y_train[i], cfg.score_lr_shift)
            trace.extend(overflow_monitor(logits))
        if cfg.method == "priot_s":
            _audit_unscored(scores)
        metrics = evaluate(epoch, t0, trace)
        history.append(metrics)
        if callback:
            callback(metrics)
        if inspect:
            inspect(epoch, net.weights, scores)
        log.info("%s epoch %d: train %.4f test %.4f overflow %.4f", cfg.method, epoch,
                 metrics.train_acc, metrics.test_acc, metrics.overflow_fraction)
        if metrics.train_acc > best_acc:
            best_epoch, best_acc, best_state = epoch, metrics.train_acc, snapshot()

    if cfg.uses_scores and [w.tobytes() for w in net.weights] != frozen_weights:
        raise InvariantError("frozen weights were modified during score training")
    if net.scales.mode == "static" and net.scales.as_dict() != frozen_scales:
        raise InvariantError("static scales changed during training")

    weights, best_scores = best_state
    best_ckpt = Checkpoint(ckpt.spec, weights, ckpt.scales, best_scores,
                           metadata=dict(ckpt.metadata, method=cfg.method, seed=cfg.seed,
                                         epoch=best_epoch))
    return RunResult(cfg, history, best_epoch, history[best_epoch].test_acc,
                     pre_test, pre_train, best_ckpt, names)


def _audit_unscored(scores):
    for s in scores:
        mask = s.mask()
        if not mask[~s.scored_mask()].all():
            raise InvariantError("an unscored edge was pruned")


def evaluate_checkpoint(ckpt, X, y, rounding="nearest"):
    """Test accuracy of a stored model (masks applied when it carries scores)."""
    scales = ckpt.scales if ckpt.scales is not None else ScaleSet.dynamic(len(ckpt.weights))
    net = IntegerNetwork(ckpt.spec, ckpt.weights, scales, rounding)
    masks = None if ckpt.scores is None else [s.mask() for s in ckpt.scores]
    return net.accuracy(X, y, masks)
