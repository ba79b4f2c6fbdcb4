"""Image container helpers, colour conversion, augmentation and file I/O.

Images are plain ``numpy`` arrays laid out ``(H, W, C)`` in row-major
order, float32, nominal range [0, 1].  Intermediates may leave that range.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "DTYPE",
    "ShapeMismatch",
    "ImageFormatError",
    "as_image",
    "check_image",
    "make_rng",
    "load_image",
    "save_image",
    "quantize",
    "read_tensor",
    "write_tensor",
    "rgb_to_y",
    "crop_patch",
    "flip_h",
    "flip_v",
    "concat_channels",
    "split_channels",
]

DTYPE = np.float32

TENSOR_MAGIC = b"OPIRTNSR"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<8sIIII")

# BT.601 full-range luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ShapeMismatch(ValueError):
    """Two rasters that must agree in shape do not."""


class ImageFormatError(ValueError):
    """A file cannot be decoded into a supported raster."""


def as_image(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` to an ``(H, W, C)`` array; 2-D input gains a channel axis."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C) raster, got shape {arr.shape}")
    return arr


def check_image(img: np.ndarray, min_size: int = 3, channels=None) -> np.ndarray:
    if img.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C) raster, got shape {img.shape}")
    h, w, c = img.shape
    if h < min_size or w < min_size:
        raise ShapeMismatch(f"raster {h}x{w} smaller than {min_size}x{min_size}")
    if channels is not None and c not in np.atleast_1d(channels):
        raise ShapeMismatch(f"unsupported channel count {c}")
    if not np.all(np.isfinite(img)):
        raise ValueError("raster contains non-finite values")
    return img


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit samples."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    img = as_image(img)
    if img.shape[2] not in (1, 3):
        raise ImageFormatError(f"PNG output supports 1 or 3 channels, got {img.shape[2]}")
    q = quantize(img)
    mode_arr = q[:, :, 0] if q.shape[2] == 1 else q
    path = Path(path)
    try:
        PILImage.fromarray(mode_arr).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """Read a PNG (8-bit gray/RGB) or raw tensor file into an ``(H, W, C)`` raster."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(TENSOR_MAGIC))
    if head == TENSOR_MAGIC:
        return read_tensor(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    if mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit L or RGB)")
    return as_image(arr.astype(np.float64) / 255.0)


def write_tensor(arr: np.ndarray, path) -> None:
    """Write the raw little-endian float32 tensor format (``H x W x C``)."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"raw tensors are 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ImageFormatError(f"{path}: truncated tensor header")
    magic, version, h, w, c = _HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise ImageFormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise ImageFormatError(f"{path}: unsupported tensor version {version}")
    n = h * w * c
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise ImageFormatError(f"{path}: expected {n} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(h, w, c)


# ---------------------------------------------------------------------------
# Pixel operations
# ---------------------------------------------------------------------------

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"rgb_to_y needs 3 channels, got shape {img.shape}")
    r, g, b = LUMA_WEIGHTS
    return (r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2])[:, :, None]


def crop_patch(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if top < 0 or left < 0 or size <= 0 or top + size > h or left + size > w:
        raise IndexError(f"crop ({top}, {left}, {size}) outside {h}x{w} raster")
    return img[top:top + size, left:left + size].copy()


def flip_h(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def flip_v(img: np.ndarray) -> np.ndarray:
    return img[::-1].copy()


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=-1)


def split_channels(x: np.ndarray, n_first: int):
    return x[..., :n_first], x[..., n_first:]
