"""Fixed-width integer tensors and the saturating / shifting primitives.

Tensors are plain numpy arrays; the dtype carries the role:

* ``int8``  -- weights, activations, errors and scores (``QuantTensor8``)
* ``int32`` -- products of int8 x int8 accumulation (``AccTensor32``)
* ``bool``  -- edge masks (``BitMask``)

Every array is C-contiguous (row-major).
"""
import numpy as np

INT8_MIN = -128
INT8_MAX = 127
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1
MAX_SHIFT = 31

ROUNDING_MODES = ("nearest", "floor", "stochastic")

# Set to True to range-check every accumulator before it is narrowed to int32.
DEBUG_ACCUMULATORS = False


class ShapeError(ValueError):
    """Operands whose shapes do not agree."""


def clamp_i8(x):
    """Saturate an integer array into [-128, 127] and narrow it to int8."""
    return np.clip(x, INT8_MIN, INT8_MAX).astype(np.int8)


def as_acc32(x):
    x = np.asarray(x)
    if DEBUG_ACCUMULATORS and x.size:
        lo, hi = int(x.min()), int(x.max())
        if lo < INT32_MIN or hi > INT32_MAX:
            raise OverflowError(f"accumulator out of int32 range: [{lo}, {hi}]")
    return x.astype(np.int32)


def _check_shift(shift):
    s = np.asarray(shift, dtype=np.int64)
    if s.size and (s.min() < 0 or s.max() > MAX_SHIFT):
        raise ValueError(f"shift must lie in [0, {MAX_SHIFT}], got {shift!r}")
    return s


def requantize(acc, shift, rounding="nearest", rng=None):
    """Shift a 32-bit accumulator right by ``shift`` bits and saturate to int8.

    ``shift`` is normally a scalar; an array broadcastable against ``acc``
    gives one shift per sample (dynamic scaling over a batch).

    Rounding modes:

    nearest
        round half away from zero: ``sign(a) * ((|a| + 2**(s-1)) >> s)``
    floor
        arithmetic shift, i.e. round toward minus infinity
    stochastic
        round up with probability equal to the discarded fraction; needs
        ``rng`` (a ``numpy.random.Generator`` or an int seed)
    """
    a = np.asarray(acc, dtype=np.int64)
    s = _check_shift(shift)
    if rounding == "nearest":
        mag = np.abs(a)
        half = (np.int64(1) << s) >> 1
        out = np.sign(a) * ((mag + half) >> s)
    elif rounding == "floor":
        out = a >> s
    elif rounding == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng or seed")
        rng = np.random.default_rng(rng)
        floor = a >> s
        frac = a - (floor << s)
        draw = rng.integers(0, np.int64(1) << s, size=a.shape, dtype=np.int64)
        out = floor + (draw < frac)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    return clamp_i8(out)


def matmul_i8(a, b):
    """Exact int8 x int8 matrix product with 32-bit accumulation.

    Operands may carry leading batch dimensions, as with ``numpy.matmul``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return as_acc32(np.matmul(a.astype(np.int64), b.astype(np.int64)))


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def saturating_add_i8(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b)
    return clamp_i8(a.astype(np.int16) + b.astype(np.int16))


def saturating_sub_i8(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b)
    return clamp_i8(a.astype(np.int16) - b.astype(np.int16))


def apply_mask(t, mask):
    """Zero every element of ``t`` whose mask entry is False."""
    t, mask = np.asarray(t), np.asarray(mask, dtype=bool)
    _same_shape(t, mask)
    return np.where(mask, t, 0).astype(t.dtype)
