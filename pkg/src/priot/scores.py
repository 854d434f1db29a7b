"""Edge scores, threshold masks and score updates for pruning-based training.

Weights stay frozen.  Every scored edge carries an int8 score; an edge is
pruned for the forward pass when its score is below a fixed threshold.  The
dense variant scores every edge (:class:`ScoreTensor`); the sparse variant
scores a preselected subset only (:class:`SparseScores`) and never prunes the
rest.
"""
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .intops import (INT8_MAX, INT8_MIN, ShapeError, apply_mask, as_acc32,
                     requantize, saturating_sub_i8)

SCORE_SIGMA = 32.0


@dataclass
class ScoreTensor:
    scores: np.ndarray
    threshold: int

    @property
    def shape(self):
        return self.scores.shape

    def mask(self):
        return mask_from_threshold(self)

    def copy(self):
        return ScoreTensor(self.scores.copy(), self.threshold)


@dataclass
class SparseScores:
    """Scores stored at sorted flat weight indices ``coords`` only."""
    coords: np.ndarray
    scores: np.ndarray
    threshold: int
    shape: tuple

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.int8)
        self.shape = tuple(self.shape)
        size = int(np.prod(self.shape))
        if self.coords.shape != self.scores.shape or self.coords.ndim != 1:
            raise ShapeError("coords and scores must be 1-D and equally long")
        if self.coords.size and (np.any(np.diff(self.coords) <= 0)
                                 or self.coords[0] < 0 or self.coords[-1] >= size):
            raise ValueError("coords must be strictly increasing and inside the weight")

    def scored_mask(self):
        """The boolean matrix M: True where an edge carries a score."""
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.coords] = True
        return m.reshape(self.shape)

    def mask(self):
        return priot_s_mask(self)

    def copy(self):
        return SparseScores(self.coords.copy(), self.scores.copy(), self.threshold, self.shape)


def init_scores(shape, rng=None, sigma=SCORE_SIGMA, variance=False):
    """int8 scores drawn from a zero-mean normal, rounded and saturated.

    ``sigma`` is the standard deviation; with ``variance=True`` it is read as
    the variance instead.
    """
    rng = np.random.default_rng(rng)
    std = np.sqrt(sigma) if variance else sigma
    draw = rng.normal(0.0, std, size=shape)
    return np.clip(np.rint(draw), INT8_MIN, INT8_MAX).astype(np.int8)


def mask_from_threshold(s):
    """Keep edges whose score is >= threshold."""
    return np.asarray(s.scores) >= s.threshold


def priot_s_mask(sp):
    """Prune only scored edges whose score is below threshold."""
    mask = np.ones(int(np.prod(sp.shape)), dtype=bool)
    mask[sp.coords[sp.scores < sp.threshold]] = False
    return mask.reshape(sp.shape)


def _layer_acc(x, w):
    return L.conv2d_acc(x, w) if w.ndim == 4 else L.fc_acc(x, w)


def priot_fwd(x, w, s, shift, rounding="nearest", rng=None):
    """Forward through a conv (4-D ``w``) or fc layer with pruned edges zeroed."""
    w_hat = apply_mask(w, s.mask())
    return requantize(_layer_acc(x, w_hat), shift, rounding, rng)


def score_grad(dy, w, x):
    """Score-gradient accumulator ``W * (dy x^T)`` of one layer."""
    if w.ndim == 4:
        outer = L.conv2d_weight_grad(dy, x, w.shape[-1])
    else:
        outer = L.fc_weight_grad(dy, x)
    return as_acc32(w.astype(np.int64) * outer)


def priot_bwd(dy, w, x, shift, rounding="nearest", rng=None):
    """Return ``(dx, dS_acc)``; ``dx`` uses the unmasked weights."""
    if w.ndim == 4:
        acc = L.conv2d_input_grad_acc(dy, w, np.shape(x))
    else:
        acc = L.fc_input_grad_acc(dy, w)
    return requantize(acc, shift, rounding, rng), score_grad(dy, w, x)


def update_scores(s, ds_acc, shift, rounding="nearest", rng=None):
    """Gradient-descent step on the scores, in place: S <- sat(S - rq(dS))."""
    step = requantize(ds_acc, shift, rounding, rng)
    if step.shape != s.scores.shape:
        raise ShapeError(f"score gradient {step.shape} vs scores {s.scores.shape}")
    s.scores = saturating_sub_i8(s.scores, step)
    return s


def n_scored(size, pruning_rate):
    """Number of scored edges when a fraction ``pruning_rate`` stays unscored."""
    return int(round(size * (1.0 - pruning_rate)))


def select_scored_edges(w, pruning_rate, strategy="random", rng=None,
                        threshold=0, sigma=SCORE_SIGMA, variance=False):
    """Pick the edges that receive scores and initialise those scores.

    ``random`` samples uniformly without replacement; ``weight_based`` takes
    the largest ``|w|`` (ties to the lower index).
    """
    if not 0.0 <= pruning_rate <= 1.0:
        raise ValueError(f"pruning rate {pruning_rate} outside [0, 1]")
    rng = np.random.default_rng(rng)
    w = np.asarray(w)
    n = n_scored(w.size, pruning_rate)
    if strategy == "random":
        coords = rng.choice(w.size, size=n, replace=False)
    elif strategy == "weight_based":
        order = np.argsort(-np.abs(w.ravel().astype(np.int16)), kind="stable")
        coords = order[:n]
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    coords = np.sort(coords)
    return SparseScores(coords, init_scores(n, rng, sigma, variance), threshold, w.shape)


def pruned_count(s):
    return int((s.scores < s.threshold).sum())
