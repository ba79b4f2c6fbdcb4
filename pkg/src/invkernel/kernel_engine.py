"""Per-pixel 3x3 inverse-operator filtering with shared-kernel dilation.

Shapes (leading batch axes are allowed everywhere):

* image          ``(..., H, W, C)``
* kernel field   ``(..., H, W, 9)``, taps in row-major offset order
  ``(-1,-1), (-1,0), (-1,1), (0,-1), (0,0), (0,1), (1,-1), (1,0), (1,1)``
* fusion field   ``(..., H, W, S)``, one simplex vector per pixel
* sampled tensor ``(..., H, W, 9, S, C)``

Out-of-range reads clamp to the nearest edge pixel.  The fast path
multiplies the nine taps against pre-gathered samples, so its arithmetic
per pixel depends on the number of scales only; the naive path builds the
dense ``(2s+1) x (2s+1)`` kernels and correlates with every position.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .image_core import ShapeMismatch

__all__ = [
    "TAP_OFFSETS",
    "DEFAULT_SCALES",
    "SimplexViolation",
    "identity_kernel",
    "check_scales",
    "shift",
    "shift_adjoint",
    "apply_single_scale",
    "materialize_dilated",
    "correlate_dense",
    "gather_samples",
    "apply_multiscale_fast",
    "apply_multiscale_naive",
    "multiscale_backward",
    "uncertainty_map",
    "uncertainty_backward",
    "softmax_fusion",
    "softmax_backward",
]

TAP_OFFSETS = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
CENTER_TAP = 4
DEFAULT_SCALES = (1, 2, 4)
SIMPLEX_TOL = 1e-4


class SimplexViolation(ValueError):
    """Fusion weights are negative or do not sum to one."""


def identity_kernel(h: int, w: int, dtype=np.float32, batch=()) -> np.ndarray:
    K = np.zeros(tuple(batch) + (h, w, 9), dtype=dtype)
    K[..., CENTER_TAP] = 1
    return K


def check_scales(scales) -> tuple:
    scales = tuple(int(s) for s in scales)
    if not scales:
        raise ValueError("scale set must not be empty")
    if any(s < 1 for s in scales):
        raise ValueError(f"scales must be positive, got {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"scales must be strictly increasing, got {scales}")
    return scales


def _clamped(n: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(n) + offset, 0, n - 1)


def shift(img: np.ndarray, dr: int, dc: int, rows=None) -> np.ndarray:
    """``out[p] = img[clamp(p + (dr, dc))]`` over the ``(H, W)`` axes.

    ``rows`` restricts the output to a slice of row indices.
    """
    h, w = img.shape[-3], img.shape[-2]
    ri = _clamped(h, dr) if rows is None else np.clip(np.arange(h)[rows] + dr, 0, h - 1)
    ci = _clamped(w, dc)
    return np.take(np.take(img, ri, axis=-3), ci, axis=-2)


def _adjoint_1d(g: np.ndarray, offset: int, axis: int) -> np.ndarray:
    n = g.shape[axis]
    out = np.zeros_like(g)
    ax = axis % g.ndim

    def sl(a, b):
        idx = [slice(None)] * g.ndim
        idx[ax] = slice(a, b)
        return tuple(idx)

    if offset >= 0:
        o = min(offset, n)
        out[sl(o, n)] += g[sl(0, n - o)]
        out[sl(n - 1, n)] += g[sl(n - o, n)].sum(axis=ax, keepdims=True)
    else:
        o = min(-offset, n)
        out[sl(0, n - o)] += g[sl(o, n)]
        out[sl(0, 1)] += g[sl(0, o)].sum(axis=ax, keepdims=True)
    return out


def shift_adjoint(g: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Transpose of :func:`shift`: scatter-add ``g`` back to the read positions."""
    return _adjoint_1d(_adjoint_1d(g, dc, -2), dr, -3)


def _check_kernel(img: np.ndarray, K: np.ndarray) -> None:
    if K.shape[-1] != 9 or K.shape[:-1] != img.shape[:-1]:
        raise ShapeMismatch(f"kernel field {K.shape} does not match image {img.shape}")


def apply_single_scale(I: np.ndarray, K: np.ndarray, s: int) -> np.ndarray:
    """``out(p) = sum_d K_p(d) * I(p + s*d)`` per channel."""
    _check_kernel(I, K)
    if s < 1:
        raise ValueError("scale must be >= 1")
    out = None
    for i, (dr, dc) in enumerate(TAP_OFFSETS):
        term = K[..., i, None] * shift(I, s * dr, s * dc)
        out = term if out is None else out + term
    return out


def materialize_dilated(K: np.ndarray, s: int) -> np.ndarray:
    """Dense ``(..., H, W, 2s+1, 2s+1)`` kernels with taps placed at ``s * d``."""
    if s < 1:
        raise ValueError("scale must be >= 1")
    n = 2 * s + 1
    dense = np.zeros(K.shape[:-1] + (n, n), dtype=K.dtype)
    for i, (dr, dc) in enumerate(TAP_OFFSETS):
        dense[..., s + s * dr, s + s * dc] = K[..., i]
    return dense


def correlate_dense(I: np.ndarray, dense: np.ndarray, rows=None) -> np.ndarray:
    """Per-pixel correlation with a dense odd-sized kernel, visiting every position."""
    n = dense.shape[-1]
    r = n // 2
    out = None
    for a in range(n):
        for b in range(n):
            term = dense[..., a, b, None] * shift(I, a - r, b - r, rows=rows)
            out = term if out is None else out + term
    return out


def gather_samples(I: np.ndarray, scales) -> np.ndarray:
    """Sampled tensor ``(..., H, W, 9, S, C)`` with ``[p, i, s] = I(p + s*d_i)``."""
    scales = check_scales(scales)
    out = np.empty(I.shape[:-1] + (9, len(scales), I.shape[-1]), dtype=I.dtype)
    for si, s in enumerate(scales):
        for i, (dr, dc) in enumerate(TAP_OFFSETS):
            out[..., i, si, :] = shift(I, s * dr, s * dc)
    return out


def _check_alpha(alpha: np.ndarray, n_scales: int, spatial) -> None:
    if alpha.shape[-1] != n_scales or alpha.shape[:-1] != spatial:
        raise ShapeMismatch(f"fusion field {alpha.shape} does not match {spatial} x {n_scales}")
    if np.any(alpha < -SIMPLEX_TOL) or np.any(np.abs(alpha.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise SimplexViolation("fusion weights leave the probability simplex")


def _fast_rows(samples, K, alpha, out, rows):
    smp, k, a = samples[..., rows, :, :, :, :], K[..., rows, :, :], alpha[..., rows, :, :]
    acc_out = None
    for si in range(smp.shape[-2]):
        acc = k[..., 0, None] * smp[..., 0, si, :]
        for i in range(1, 9):
            acc = acc + k[..., i, None] * smp[..., i, si, :]
        term = a[..., si, None] * acc
        acc_out = term if acc_out is None else acc_out + term
    out[..., rows, :, :] = acc_out


def apply_multiscale_fast(samples: np.ndarray, K: np.ndarray, alpha: np.ndarray,
                          tile_rows: int | None = None, workers: int = 1) -> np.ndarray:
    """Fused multi-scale filtering from a pre-gathered sampled tensor.

    Row tiles are independent; the per-pixel accumulation order (taps inner,
    scales outer) is fixed, so results are identical for any tiling.
    """
    spatial = samples.shape[:-3]
    if K.shape != spatial + (9,) or samples.shape[-3] != 9:
        raise ShapeMismatch(f"kernel field {K.shape} does not match samples {samples.shape}")
    _check_alpha(alpha, samples.shape[-2], spatial)
    h = samples.shape[-5]
    out = np.empty(spatial + (samples.shape[-1],),
                   dtype=np.result_type(samples.dtype, K.dtype, alpha.dtype))
    step = h if not tile_rows else max(1, int(tile_rows))
    tiles = [slice(r, min(r + step, h)) for r in range(0, h, step)]
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda rs: _fast_rows(samples, K, alpha, out, rs), tiles))
    else:
        for rs in tiles:
            _fast_rows(samples, K, alpha, out, rs)
    return out


def apply_multiscale_naive(I: np.ndarray, K: np.ndarray, scales, alpha: np.ndarray,
                           tile_rows: int = 32) -> np.ndarray:
    """Reference semantics: dense dilated kernels, full correlation, then fusion."""
    scales = check_scales(scales)
    _check_kernel(I, K)
    _check_alpha(alpha, len(scales), I.shape[:-1])
    h = I.shape[-3]
    out = np.empty(I.shape, dtype=np.result_type(I.dtype, K.dtype, alpha.dtype))
    for r0 in range(0, h, tile_rows):
        rows = slice(r0, min(r0 + tile_rows, h))
        acc = None
        for si, s in enumerate(scales):
            dense = materialize_dilated(K[..., rows, :, :], s)
            term = alpha[..., rows, :, si, None] * correlate_dense(I, dense, rows=rows)
            acc = term if acc is None else acc + term
        out[..., rows, :, :] = acc
    return out


def multiscale_backward(samples, K, alpha, d_out, scales=None):
    """Gradients of the fast path.

    Returns ``(dK, dalpha, dI)``; ``dI`` is ``None`` unless ``scales`` is
    given, in which case the sample gather is transposed back onto the image.
    """
    n_s = samples.shape[-2]
    dK = np.zeros_like(K)
    dalpha = np.zeros_like(alpha)
    for si in range(n_s):
        a = alpha[..., si, None]
        ga = a * d_out
        per_scale = None
        for i in range(9):
            smp = samples[..., i, si, :]
            dK[..., i] += (ga * smp).sum(axis=-1)
            term = K[..., i, None] * smp
            per_scale = term if per_scale is None else per_scale + term
        dalpha[..., si] = (d_out * per_scale).sum(axis=-1)
    dI = None
    if scales is not None:
        scales = check_scales(scales)
        dI = np.zeros(d_out.shape, dtype=d_out.dtype)
        for si, s in enumerate(scales):
            ga = alpha[..., si, None] * d_out
            for i, (dr, dc) in enumerate(TAP_OFFSETS):
                dI += shift_adjoint(K[..., i, None] * ga, s * dr, s * dc)
    return dK, dalpha, dI


def uncertainty_map(K: np.ndarray) -> np.ndarray:
    """Mean absolute tap weight per pixel, shaped ``(..., H, W, 1)``."""
    return np.abs(K).sum(axis=-1, keepdims=True) / 9.0


def uncertainty_backward(K: np.ndarray, d_um: np.ndarray) -> np.ndarray:
    return np.sign(K) * (d_um / 9.0)


def softmax_fusion(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(alpha: np.ndarray, d_alpha: np.ndarray) -> np.ndarray:
    return alpha * (d_alpha - (alpha * d_alpha).sum(axis=-1, keepdims=True))
