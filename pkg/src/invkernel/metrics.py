"""PSNR and SSIM, plus the per-manifest evaluation loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .image_core import ShapeMismatch, rgb_to_y

__all__ = ["psnr", "ssim", "gaussian_window", "EvalRow", "EvalReport", "format_psnr", "evaluate"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _to_mode(x, mode):
    if mode == "y":
        return rgb_to_y(x) if x.shape[-1] == 3 else x
    if mode != "rgb":
        raise ValueError(f"unknown channel mode {mode!r}")
    return x


def psnr(x, y, peak: float = 1.0, mode: str = "rgb") -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    a = _to_mode(np.asarray(x, np.float64), mode)
    b = _to_mode(np.asarray(y, np.float64), mode)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _valid_filter(img, g):
    # separable correlation over the first two axes, windows fully inside
    n = len(g)
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i:h - n + 1 + i] for i in range(n))
    return sum(g[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def ssim(x, y, peak: float = 1.0, mode: str = "rgb") -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), valid positions only, channel mean."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    a = _to_mode(np.asarray(x, np.float64), mode)
    b = _to_mode(np.asarray(y, np.float64), mode)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeMismatch(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = gaussian_window()
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den, axis=(0, 1)).mean())


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


@dataclass
class EvalRow:
    id: str
    task: int
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    mode: str
    rows: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [r.psnr_db for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_ssim(self) -> float:
        vals = [r.ssim for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["id", "task", "psnr_db", "ssim"])
            for r in self.rows:
                wr.writerow([r.id, r.task, format_psnr(r.psnr_db), f"{r.ssim:.6f}"])
            wr.writerow(["mean", "", format_psnr(self.mean_psnr), f"{self.mean_ssim:.6f}"])


def evaluate(manifest, checkpoint=None, mode: str = "auto", report=None, restore_fn=None) -> EvalReport:
    """Restore every pair in ``manifest`` and score it against its clean image.

    ``mode`` is ``rgb``, ``y`` or ``auto`` (Y for rain, RGB otherwise).  Pass
    ``restore_fn(record, degraded) -> image`` to score something other than
    the checkpoint's output.
    """
    from .checkpoint import model_from_checkpoint
    from .dataset import load_manifest
    from .degrade import DegradationKind
    from .kpn_net import two_stage_forward

    if mode not in ("auto", "rgb", "y"):
        raise ValueError(f"mode must be auto, rgb or y, got {mode!r}")
    records = load_manifest(manifest)
    model = None
    if restore_fn is None:
        if checkpoint is None:
            raise ValueError("evaluate needs a checkpoint or a restore_fn")
        model = model_from_checkpoint(checkpoint)
    rep = EvalReport(mode)
    for rec in records:
        degraded, clean = rec.load_degraded(), rec.load_clean()
        if model is not None:
            if degraded.shape[-1] != model.config.image_channels:
                raise ShapeMismatch(f"{rec.id}: {degraded.shape[-1]} channels, checkpoint expects "
                                    f"{model.config.image_channels}")
            restored = two_stage_forward(degraded, model, rec.task_id)[2]
        else:
            restored = restore_fn(rec, degraded)
        restored = np.clip(restored, 0.0, 1.0)
        m = mode if mode != "auto" else ("y" if rec.task_id == DegradationKind.RAIN else "rgb")
        rep.rows.append(EvalRow(rec.id, rec.task_id, psnr(restored, clean, mode=m),
                                ssim(restored, clean, mode=m)))
    if report is not None:
        rep.write_csv(report)
    return rep
