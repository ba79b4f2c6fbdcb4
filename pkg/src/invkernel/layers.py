"""Convolution, activation and resampling primitives with hand-written backward.

Feature maps are NHWC.  3x3 convolutions use zero padding of one pixel and
im2col, so the work is one matrix product per layer in each direction.
"""

from __future__ import annotations

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


# tanh form of GELU; the erf form costs ~40x more per element on CPU
def gelu_tanh(x):
    """Returns ``(gelu(x), t)``; pass ``t`` to :func:`gelu_grad` to skip the tanh."""
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu(x):
    return gelu_tanh(x)[0]


def gelu_grad(x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + (0.5 * _GELU_C) * x * (1.0 - t * t) * (1.0 + 3.0 * _GELU_A * x2)


def _im2col(x, stride):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = [xp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]
            for a in range(3) for b in range(3)]
    return np.concatenate(cols, axis=-1), (ho, wo)


def conv3x3(x, w, b, stride=1):
    """``w`` is ``(3, 3, Cin, Cout)``.  Returns ``(y, cache)``."""
    cols, (ho, wo) = _im2col(x, stride)
    cin, cout = w.shape[2], w.shape[3]
    y = cols.reshape(-1, 9 * cin) @ w.reshape(9 * cin, cout) + b
    return y.reshape(x.shape[0], ho, wo, cout), (cols, x.shape, stride)


def conv3x3_backward(dy, w, cache, need_dx=True):
    cols, xshape, stride = cache
    cin, cout = w.shape[2], w.shape[3]
    dy2 = dy.reshape(-1, cout)
    dw = (cols.reshape(-1, 9 * cin).T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if stride == 1:
        # transposed stride-1 conv is a conv with the flipped, channel-swapped kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = conv3x3(dy, wf, np.zeros(cin, dtype=dy.dtype))
        return dx, dw, db
    n, h, wd, _ = xshape
    ho, wo = dy.shape[1], dy.shape[2]
    dcols = (dy2 @ w.reshape(9 * cin, cout).T).reshape(n, ho, wo, 9, cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dy.dtype)
    for t in range(9):
        a, b = divmod(t, 3)
        dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, t, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def conv1x1(x, w, b):
    """``w`` is ``(Cin, Cout)``."""
    return x @ w + b


def conv1x1_backward(dy, x, w):
    cout = w.shape[1]
    dy2 = dy.reshape(-1, cout)
    dw = x.reshape(-1, w.shape[0]).T @ dy2
    return dy @ w.T, dw, dy2.sum(axis=0)


def upsample2x(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2x_backward(dy):
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def edge_pad(x, ph, pw):
    """Replicate the last row/column ``ph``/``pw`` times."""
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")


def edge_pad_backward(dy, h, w):
    g = dy[:, :h]
    if dy.shape[1] > h:
        g = g.copy()
        g[:, h - 1] += dy[:, h:].sum(axis=1)
    out = g[:, :, :w]
    if g.shape[2] > w:
        out = out.copy()
        out[:, :, w - 1] += g[:, :, w:].sum(axis=2)
    return out
