"""Training objective: Charbonnier content, Laplacian edge and spectral L1 terms.

Each term returns ``(value, grad_wrt_x)``.  Values are reduced in float64;
gradients keep the dtype of ``x``.  Arrays are ``(..., H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fft import fft2, is_power_of_two
from .image_core import ShapeMismatch
from .kernel_engine import shift, shift_adjoint

__all__ = [
    "LossWeights",
    "charbonnier",
    "laplacian",
    "laplacian_adjoint",
    "edge_loss",
    "freq_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    freq: float = 0.1      # lambda
    edge: float = 0.05     # delta_w
    eps: float = 1e-3

    def __post_init__(self):
        if min(self.freq, self.edge, self.eps) < 0:
            raise ValueError("loss weights must be non-negative")


def _same(x, y):
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")


def charbonnier(x, y, eps=1e-3):
    """Mean of ``sqrt((x - y)^2 + eps^2)`` over all elements."""
    _same(x, y)
    d = np.asarray(x, np.float64) - np.asarray(y, np.float64)
    r = np.sqrt(d * d + eps * eps)
    grad = (d / r / d.size).astype(np.result_type(x.dtype, np.float32))
    return float(r.mean()), grad


_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def laplacian(x):
    """Four-neighbour Laplacian with edge replication."""
    out = -4.0 * x
    for dr, dc in _NEIGHBOURS:
        out = out + shift(x, dr, dc)
    return out


def laplacian_adjoint(g):
    out = -4.0 * g
    for dr, dc in _NEIGHBOURS:
        out = out + shift_adjoint(g, dr, dc)
    return out


def edge_loss(x, y, eps=1e-3):
    _same(x, y)
    val, g = charbonnier(laplacian(np.asarray(x, np.float64)), laplacian(np.asarray(y, np.float64)), eps)
    return val, laplacian_adjoint(g).astype(g.dtype if x.dtype == np.float64 else x.dtype)


def freq_loss(x, y):
    """Mean of ``|Re| + |Im|`` of the spectrum difference over bins and channels.

    The subgradient uses ``sign(0) = 0``.
    """
    _same(x, y)
    h, w = x.shape[-3], x.shape[-2]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"frequency loss needs power-of-two sides, got {h}x{w}")
    D = fft2(np.asarray(x, np.float64) - np.asarray(y, np.float64))
    n = D.size
    val = float((np.abs(D.real) + np.abs(D.imag)).sum() / n)
    # d|Re D_k|/dx_n = s_r cos, d|Im D_k|/dx_n = -s_i sin  ->  Re(F(s_r - i s_i))
    pull = fft2(np.sign(D.real) - 1j * np.sign(D.imag)).real / n
    return val, pull.astype(x.dtype)


def total_loss(outputs, target, weights: LossWeights = LossWeights()):
    """Sum over stage outputs of ``L_c + edge * L_e + freq * L_f``.

    Returns ``(total, grads, parts)``; ``parts`` holds the summed
    ``loss_c``, ``loss_e`` and ``loss_f`` terms before weighting.
    """
    if not outputs:
        raise ValueError("total_loss needs at least one output")
    total = 0.0
    grads = []
    parts = {"loss_c": 0.0, "loss_e": 0.0, "loss_f": 0.0}
    for out in outputs:
        lc, gc = charbonnier(out, target, weights.eps)
        le, ge = edge_loss(out, target, weights.eps)
        lf, gf = freq_loss(out, target)
        total += lc + weights.edge * le + weights.freq * lf
        grads.append((gc + weights.edge * ge + weights.freq * gf).astype(out.dtype))
        parts["loss_c"] += lc
        parts["loss_e"] += le
        parts["loss_f"] += lf
    return total, grads, parts
