"""Synthetic rain, snow and haze, their shared affine form, and exact inverses.

Every generator returns the degraded image together with the ground-truth
maps that produced it.  ``to_affine`` folds those maps into a per-pixel
gain/bias pair ``I = g * J + b`` and ``oracle_inverse`` undoes it, which is
what the tests use as a known-operator reference.

Generators compute in float64 so the round trip through a small gain stays
well inside 1e-5.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image_core import ShapeMismatch, as_image, make_rng

__all__ = [
    "DegradationKind",
    "NearSingularGain",
    "RainParams",
    "Streak",
    "SnowParams",
    "HazeParams",
    "GainParams",
    "PerPixelAffine",
    "sample_streaks",
    "rasterize_streaks",
    "apply_rain",
    "apply_snow",
    "apply_haze",
    "apply_gain",
    "to_affine",
    "oracle_inverse",
    "oracle_inverse_masked",
    "procedural_texture",
    "procedural_depth",
]

G_FLOOR = 1e-3


class DegradationKind(enum.IntEnum):
    RAIN = 0
    SNOW = 1
    HAZE = 2

    @classmethod
    def parse(cls, value) -> "DegradationKind":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                pass
            if value.isdigit():
                value = int(value)
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise ValueError(f"unknown task {value!r}; expected rain/snow/haze or 0/1/2") from None


class NearSingularGain(ValueError):
    """The degradation gain is too close to zero to invert at some pixel."""


def _check_range(name, rng_pair, lo=None, hi=None):
    a, b = rng_pair
    if not a <= b:
        raise ValueError(f"{name}: empty range {rng_pair}")
    if lo is not None and a < lo:
        raise ValueError(f"{name}: lower bound {a} below {lo}")
    if hi is not None and b > hi:
        raise ValueError(f"{name}: upper bound {b} above {hi}")


def _params_text(params) -> str:
    parts = []
    for key, value in asdict(params).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Rain: I = J + sum_k R_k
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RainParams:
    num_streaks: int = 40
    length_range: tuple = (8.0, 24.0)
    angle_range: tuple = (-0.35, 0.35)
    width_range: tuple = (1.0, 2.0)
    intensity_range: tuple = (0.2, 0.6)
    seed: int = 0

    def __post_init__(self):
        if self.num_streaks < 0:
            raise ValueError("num_streaks must be >= 0")
        _check_range("length_range", self.length_range, lo=0.0)
        _check_range("angle_range", self.angle_range)
        _check_range("width_range", self.width_range, lo=0.0)
        _check_range("intensity_range", self.intensity_range, lo=0.0, hi=1.0)

    def as_text(self) -> str:
        return _params_text(self)


@dataclass(frozen=True)
class Streak:
    """One line segment; ``angle`` is measured from vertical."""

    row: float
    col: float
    length: float
    angle: float
    width: float
    intensity: float


def sample_streaks(shape, p: RainParams) -> list[Streak]:
    h, w = shape[:2]
    rng = make_rng(p.seed)
    streaks = []
    for _ in range(p.num_streaks):
        streaks.append(Streak(
            row=float(rng.uniform(0, h)),
            col=float(rng.uniform(0, w)),
            length=float(rng.uniform(*p.length_range)),
            angle=float(rng.uniform(*p.angle_range)),
            width=float(rng.uniform(*p.width_range)),
            intensity=float(rng.uniform(*p.intensity_range)),
        ))
    return streaks


def _render_streak(out: np.ndarray, s: Streak) -> None:
    h, w = out.shape
    dr, dc = math.cos(s.angle), math.sin(s.angle)
    half = 0.5 * s.length
    r0, c0 = s.row - half * dr, s.col - half * dc
    r1, c1 = s.row + half * dr, s.col + half * dc
    pad = 0.5 * s.width + 1.0
    top = max(int(math.floor(min(r0, r1) - pad)), 0)
    bot = min(int(math.ceil(max(r0, r1) + pad)) + 1, h)
    lft = max(int(math.floor(min(c0, c1) - pad)), 0)
    rgt = min(int(math.ceil(max(c0, c1) + pad)) + 1, w)
    if top >= bot or lft >= rgt:
        return
    rr, cc = np.mgrid[top:bot, lft:rgt].astype(np.float64)
    # distance from pixel centre to the segment
    t = ((rr - r0) * dr + (cc - c0) * dc) / max(s.length, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    d = np.hypot(rr - (r0 + t * (r1 - r0)), cc - (c0 + t * (c1 - c0)))
    coverage = np.clip(0.5 * s.width + 0.5 - d, 0.0, 1.0)
    out[top:bot, lft:rgt] += s.intensity * coverage


def rasterize_streaks(shape, streaks) -> np.ndarray:
    """Sum of anti-aliased streak layers as an ``(H, W)`` float64 field."""
    h, w = shape[:2]
    acc = np.zeros((h, w), dtype=np.float64)
    for s in streaks:
        _render_streak(acc, s)
    return acc


def apply_rain(J: np.ndarray, p: RainParams, streaks=None):
    """Additive streaks.  Returns ``(I, R)`` with ``R`` broadcast to J's channels."""
    J = as_image(J, np.float64)
    if streaks is None:
        streaks = sample_streaks(J.shape, p)
    R = np.repeat(rasterize_streaks(J.shape, streaks)[:, :, None], J.shape[2], axis=2)
    I = J + R
    if not np.all(np.isfinite(I)):
        raise FloatingPointError("rain synthesis produced non-finite values")
    return I, R


# ---------------------------------------------------------------------------
# Snow: I = M * S + (1 - M) * J
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnowParams:
    density: float = 0.1
    particle_radius_range: tuple = (1.0, 3.0)
    particle_intensity_range: tuple = (0.8, 1.0)
    mask_softness: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must lie in [0, 1]")
        _check_range("particle_radius_range", self.particle_radius_range, lo=1.0)
        _check_range("particle_intensity_range", self.particle_intensity_range, lo=0.0, hi=1.0)
        if self.mask_softness < 0:
            raise ValueError("mask_softness must be >= 0")

    def as_text(self) -> str:
        return _params_text(self)


def apply_snow(J: np.ndarray, p: SnowParams):
    """Occluding disks.  Returns ``(I, M, S)``, all shaped like ``J``."""
    J = as_image(J, np.float64)
    h, w, c = J.shape
    rng = make_rng(p.seed)
    lo, hi = p.particle_radius_range
    mean_area = math.pi * (0.5 * (lo + hi)) ** 2
    n = int(round(p.density * h * w / mean_area))

    hard = np.zeros((h, w), dtype=np.float64)
    S = np.full((h, w), 0.5 * sum(p.particle_intensity_range), dtype=np.float64)
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(lo, hi)
        val = rng.uniform(*p.particle_intensity_range)
        disk = (rr + 0.5 - r0) ** 2 + (cc + 0.5 - c0) ** 2 <= rad * rad
        hard[disk] = 1.0
        S[disk] = val
    if p.mask_softness > 0 and n > 0:
        size = 2 * p.mask_softness + 1
        M = ndimage.uniform_filter(hard, size=size, mode="nearest")
        M = np.clip(M, 0.0, 1.0)
    else:
        M = hard
    M = np.repeat(M[:, :, None], c, axis=2)
    S = np.repeat(S[:, :, None], c, axis=2)
    I = M * S + (1.0 - M) * J
    return I, M, S


# ---------------------------------------------------------------------------
# Haze: I = J * t + A * (1 - t)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HazeParams:
    atmospheric_light: tuple = (0.9, 0.9, 0.9)
    transmission: np.ndarray | None = field(default=None, compare=False)
    beta: float | None = None
    depth: np.ndarray | None = field(default=None, compare=False)
    t_min: float = 0.05

    def __post_init__(self):
        if self.transmission is None and (self.beta is None or self.depth is None):
            raise ValueError("haze needs either a transmission map or beta with a depth map")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.depth is not None and np.any(np.asarray(self.depth) < 0):
            raise ValueError("depth must be >= 0")
        if not np.all(np.isfinite(self.atmospheric_light)):
            raise ValueError("atmospheric light must be finite")

    def as_text(self) -> str:
        A = ",".join(repr(float(a)) for a in np.atleast_1d(self.atmospheric_light))
        src = "map" if self.transmission is not None else f"beta={self.beta!r}"
        return f"atmospheric_light={A} transmission_source={src} t_min={self.t_min!r}"


def transmission_map(p: HazeParams, shape) -> np.ndarray:
    if p.transmission is not None:
        t = np.asarray(p.transmission, dtype=np.float64)
    else:
        t = np.exp(-p.beta * np.asarray(p.depth, dtype=np.float64))
    if t.ndim == 2:
        t = t[:, :, None]
    t = np.broadcast_to(t, shape[:2] + (t.shape[2],))
    return np.clip(t, p.t_min, 1.0)


def apply_haze(J: np.ndarray, p: HazeParams):
    """Atmospheric scattering.  Returns ``(I, t)``; ``t`` carries J's channel count."""
    J = as_image(J, np.float64)
    t = transmission_map(p, J.shape)
    t = np.array(np.broadcast_to(t, J.shape))
    A = np.broadcast_to(np.asarray(p.atmospheric_light, dtype=np.float64), (J.shape[2],))
    I = J * t + A * (1.0 - t)
    return I, t


# ---------------------------------------------------------------------------
# Gain-only attenuation: I = g * J
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainParams:
    """Spatially constant attenuation drawn per image."""

    gain_range: tuple = (0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        _check_range("gain_range", self.gain_range, lo=0.0)

    def as_text(self) -> str:
        return _params_text(self)


def apply_gain(J: np.ndarray, p: GainParams):
    J = as_image(J, np.float64)
    g = float(make_rng(p.seed).uniform(*p.gain_range))
    G = np.full(J.shape, g, dtype=np.float64)
    return G * J, G


# ---------------------------------------------------------------------------
# Affine form and oracle inverse
# ---------------------------------------------------------------------------

@dataclass
class PerPixelAffine:
    gain: np.ndarray
    bias: np.ndarray
    g_floor: float = G_FLOOR

    def __post_init__(self):
        if self.gain.shape != self.bias.shape:
            raise ShapeMismatch(f"gain {self.gain.shape} vs bias {self.bias.shape}")
        if not np.all(np.isfinite(self.gain)):
            raise ValueError("gain must be finite")

    @property
    def invertible(self) -> bool:
        return bool(np.min(np.abs(self.gain)) >= self.g_floor)

    def apply(self, J: np.ndarray) -> np.ndarray:
        return self.gain * J + self.bias


def _same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"inconsistent map shapes {sorted(shapes)}")


def to_affine(kind, R=None, M=None, S=None, t=None, A=None, gain=None) -> PerPixelAffine:
    """Fold the maps returned by an ``apply_*`` call into ``(g, b)``.

    Rain takes either ``R`` (additive streaks) or ``gain`` (attenuation);
    snow takes ``M`` and ``S``; haze takes ``t`` and ``A``.
    """
    kind = DegradationKind.parse(kind)
    if kind is DegradationKind.RAIN:
        if gain is not None:
            g = np.asarray(gain, dtype=np.float64)
            return PerPixelAffine(g, np.zeros_like(g))
        if R is None:
            raise ValueError("rain affine needs R or gain")
        R = np.asarray(R, dtype=np.float64)
        return PerPixelAffine(np.ones_like(R), R)
    if kind is DegradationKind.SNOW:
        if M is None or S is None:
            raise ValueError("snow affine needs M and S")
        M, S = np.asarray(M, np.float64), np.asarray(S, np.float64)
        _same_shape(M, S)
        return PerPixelAffine(1.0 - M, M * S)
    if t is None or A is None:
        raise ValueError("haze affine needs t and A")
    t = np.asarray(t, np.float64)
    A = np.broadcast_to(np.asarray(A, np.float64), (t.shape[-1],))
    return PerPixelAffine(t, A * (1.0 - t))


def oracle_inverse(a: PerPixelAffine, I: np.ndarray) -> np.ndarray:
    """Exact inverse ``(I - b) / g``; refuses when any ``|g| < g_floor``."""
    I = np.asarray(I, dtype=np.float64)
    if I.shape != a.gain.shape:
        raise ShapeMismatch(f"image {I.shape} vs affine {a.gain.shape}")
    gmin = float(np.min(np.abs(a.gain)))
    if gmin < a.g_floor:
        raise NearSingularGain(f"min |g| = {gmin:.3g} below floor {a.g_floor:g}")
    return (I - a.bias) / a.gain


def oracle_inverse_masked(a: PerPixelAffine, I: np.ndarray):
    """Invert where ``|g| >= g_floor``; elsewhere return ``I`` unchanged.

    Returns ``(J_hat, valid)`` with ``valid`` a boolean mask.
    """
    I = np.asarray(I, dtype=np.float64)
    if I.shape != a.gain.shape:
        raise ShapeMismatch(f"image {I.shape} vs affine {a.gain.shape}")
    valid = np.abs(a.gain) >= a.g_floor
    safe = np.where(valid, a.gain, 1.0)
    return np.where(valid, (I - a.bias) / safe, I), valid


# ---------------------------------------------------------------------------
# Procedural sources
# ---------------------------------------------------------------------------

def procedural_texture(shape, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Smooth random scene: oriented gratings over low-frequency blobs, in [0.05, 0.95]."""
    h, w = shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.zeros((h, w), dtype=np.float64)
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.02, 0.2)
        phase = rng.uniform(0, 2 * math.pi)
        base += rng.uniform(0.3, 1.0) * np.sin(
            2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    blobs = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="wrap")
    blobs /= np.std(blobs) + 1e-12
    base = base / 3.0 + 0.8 * blobs
    out = np.empty((h, w, channels), dtype=np.float64)
    for c in range(channels):
        tint = rng.uniform(0.7, 1.0)
        detail = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.0)
        out[:, :, c] = tint * base + 0.15 * detail
    lo, hi = out.min(), out.max()
    out = (out - lo) / max(hi - lo, 1e-12)
    return 0.05 + 0.9 * out


def procedural_depth(shape, rng: np.random.Generator, max_depth: float = 1.5) -> np.ndarray:
    """Depth increasing towards the top of the frame with smooth perturbation."""
    h, w = shape[:2]
    ramp = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
    bump = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6, mode="nearest")
    bump /= np.abs(bump).max() + 1e-12
    d = np.clip(ramp + 0.25 * bump, 0.0, None)
    return max_depth * d / max(d.max(), 1e-12)
