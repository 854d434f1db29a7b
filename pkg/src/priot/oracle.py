"""Slow reference implementations in exact Python integers.

Everything here works on nested lists of ``int`` (numpy arrays are accepted
and converted with ``tolist``).  Loops follow the textbook definitions
directly and share no code with the vectorised engine, so agreement between
the two is meaningful evidence of correctness.
"""
from fractions import Fraction
import math


def _lst(a):
    return a.tolist() if hasattr(a, "tolist") else a


def saturate(v, lo=-128, hi=127):
    return lo if v < lo else hi if v > hi else v


def requantize(value, shift, rounding="nearest"):
    """Scalar ``value / 2**shift`` rounded then saturated to int8."""
    q = Fraction(int(value), 2 ** int(shift))
    if rounding == "nearest":
        mag = math.floor(abs(q) + Fraction(1, 2))
        r = mag if q >= 0 else -mag
    elif rounding == "floor":
        r = math.floor(q)
    else:
        raise ValueError(f"oracle has no {rounding!r} rounding")
    return saturate(r)


def requantize_nd(a, shift, rounding="nearest"):
    a = _lst(a)
    if isinstance(a, list):
        return [requantize_nd(v, shift, rounding) for v in a]
    return requantize(a, shift, rounding)


def matmul(a, b):
    a, b = _lst(a), _lst(b)
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def conv2d(x, w, stride=1):
    """x: N*C*H*W, w: O*C*K*K, valid padding."""
    x, w = _lst(x), _lst(w)
    n, c, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    o, k = len(w), len(w[0][0])
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = [[[[0] * wo for _ in range(ho)] for _ in range(o)] for _ in range(n)]
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    total = 0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                total += x[b][ch][i * stride + di][j * stride + dj] * w[f][ch][di][dj]
                    out[b][f][i][j] = total
    return out


def conv2d_input_grad(dy, w, in_shape, stride=1):
    """Exact dL/dx for :func:`conv2d`; ``in_shape`` is (N, C, H, W)."""
    dy, w = _lst(dy), _lst(w)
    n, c, h, wd = in_shape
    o, k = len(w), len(w[0][0])
    ho, wo = len(dy[0][0]), len(dy[0][0][0])
    dx = [[[[0] * wd for _ in range(h)] for _ in range(c)] for _ in range(n)]
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    g = dy[b][f][i][j]
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                dx[b][ch][i * stride + di][j * stride + dj] += g * w[f][ch][di][dj]
    return dx


def conv2d_weight_grad(dy, x, kernel, stride=1):
    dy, x = _lst(dy), _lst(x)
    n, c = len(x), len(x[0])
    o, ho, wo = len(dy[0]), len(dy[0][0]), len(dy[0][0][0])
    dw = [[[[0] * kernel for _ in range(kernel)] for _ in range(c)] for _ in range(o)]
    for f in range(o):
        for ch in range(c):
            for di in range(kernel):
                for dj in range(kernel):
                    dw[f][ch][di][dj] = sum(
                        dy[b][f][i][j] * x[b][ch][i * stride + di][j * stride + dj]
                        for b in range(n) for i in range(ho) for j in range(wo))
    return dw


def fc(x, w):
    """x: N*I, w: O*I -> N*O."""
    x, w = _lst(x), _lst(w)
    return [[sum(xi * wi for xi, wi in zip(row, wrow)) for wrow in w] for row in x]


def fc_input_grad(dy, w):
    dy, w = _lst(dy), _lst(w)
    n_in = len(w[0])
    return [[sum(g[o] * w[o][i] for o in range(len(w))) for i in range(n_in)] for g in dy]


def fc_weight_grad(dy, x):
    dy, x = _lst(dy), _lst(x)
    return [[sum(dy[b][o] * x[b][i] for b in range(len(x))) for i in range(len(x[0]))]
            for o in range(len(dy[0]))]


def hadamard(a, b):
    a, b = _lst(a), _lst(b)
    if isinstance(a, list):
        return [hadamard(u, v) for u, v in zip(a, b)]
    return a * b


def score_grad(dy, w, x):
    """W times the outer-product weight gradient, elementwise."""
    w = _lst(w)
    if isinstance(w[0][0], list):
        outer = conv2d_weight_grad(dy, x, len(w[0][0]))
    else:
        outer = fc_weight_grad(dy, x)
    return hadamard(w, outer)


def maxpool2d(x, window=2):
    """Returns (maxima, in-window flat index); first maximum in scan order wins."""
    x = _lst(x)
    out, idx = [], []
    for plane_b in x:
        ob, ib = [], []
        for plane in plane_b:
            ho, wo = len(plane) // window, len(plane[0]) // window
            om = [[0] * wo for _ in range(ho)]
            im = [[0] * wo for _ in range(ho)]
            for i in range(ho):
                for j in range(wo):
                    best, pos = None, 0
                    for di in range(window):
                        for dj in range(window):
                            v = plane[i * window + di][j * window + dj]
                            if best is None or v > best:
                                best, pos = v, di * window + dj
                    om[i][j], im[i][j] = best, pos
            ob.append(om)
            ib.append(im)
        out.append(ob)
        idx.append(ib)
    return out, idx


def loss_backward_linear(logits, label, gain=127):
    return [saturate(v - (gain if i == label else 0)) for i, v in enumerate(_lst(logits))]
