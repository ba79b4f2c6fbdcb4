"""Iterative radix-2 decimation-in-time FFT over the spatial axes.

Forward transforms are unnormalised; inverse transforms divide by ``H * W``.
Both axes must be powers of two.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fft_axis", "fft2", "ifft2", "is_power_of_two"]


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_axis(x: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    """Unnormalised DFT along one axis (sign +1 in the exponent when ``inverse``)."""
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, 0)
    n = x.shape[0]
    if not is_power_of_two(n):
        raise ValueError(f"FFT length {n} is not a power of two")
    rest = x.shape[1:]
    x = x[_bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size).reshape((1, half) + (1,) * len(rest))
        blocks = x.reshape((n // size, size) + rest)
        even = blocks[:, :half]
        odd = blocks[:, half:] * tw
        x = np.concatenate([even + odd, even - odd], axis=1).reshape((n,) + rest)
        size *= 2
    return np.moveaxis(x, 0, axis)


def fft2(x: np.ndarray) -> np.ndarray:
    """Spectrum of ``(..., H, W, C)`` over ``H`` and ``W``; complex128."""
    return fft_axis(fft_axis(x, -3), -2)


def ifft2(X: np.ndarray, real: bool = True) -> np.ndarray:
    h, w = X.shape[-3], X.shape[-2]
    out = fft_axis(fft_axis(X, -3, inverse=True), -2, inverse=True) / (h * w)
    return out.real if real else out
