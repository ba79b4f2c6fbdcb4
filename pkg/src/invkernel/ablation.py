"""Component ablation: retrain with pieces switched off and compare probe PSNR.

Variant names map onto the component columns of the usual ablation table:

=============  ======  ===============  ===  ===========
variant        stages  uncertainty map  TAM  multi-scale
=============  ======  ===============  ===  ===========
one-stage      1       no               yes  yes
no-um          2       no               yes  yes
full           2       yes              yes  yes
no-tam         2       yes              no   yes
no-multiscale  2       yes              yes  no (s = 1)
=============  ======  ===============  ===  ===========
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .degrade import DegradationKind
from .trainer import TrainConfig, train

__all__ = ["VARIANTS", "AblationRow", "variant_config", "run_ablation", "write_ablation_csv", "ABLATION_HEADER"]

VARIANTS = {
    "one-stage": {"two_stage": False, "use_um": False},
    "no-um": {"use_um": False},
    "full": {},
    "no-tam": {"use_tam": False},
    "no-multiscale": {"scales": (1,)},
}

ABLATION_HEADER = ["variant", "stages", "uncertainty_map", "task_aware_module", "multiscale_kernel",
                   "psnr_rain", "psnr_snow", "psnr_haze", "psnr_mean", "delta_psnr"]


@dataclass
class AblationRow:
    variant: str
    config: TrainConfig
    psnr: dict          # task id -> probe PSNR after the final step
    checkpoint: Path

    @property
    def psnr_mean(self) -> float:
        vals = [v for v in self.psnr.values() if not math.isnan(v)]
        return sum(vals) / len(vals) if vals else math.nan


def variant_config(cfg: TrainConfig, variant: str, out_dir=None) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    out = Path(out_dir if out_dir is not None else cfg.out_dir) / variant
    return dataclasses.replace(cfg, out_dir=str(out), **VARIANTS[variant])


def run_ablation(cfg: TrainConfig, variants, out_dir=None, report=None) -> list:
    """Train each variant with the same seed, data and step budget."""
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    rows = []
    for v in variants:
        vcfg = variant_config(cfg, v, out_dir)
        res = train(vcfg)
        last = res.rows[-1]
        psnr = {t.value: float(last[6 + t.value]) for t in DegradationKind}
        rows.append(AblationRow(v, vcfg, psnr, res.final_checkpoint))
    if report is not None:
        write_ablation_csv(rows, report)
    return rows


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def write_ablation_csv(rows, path) -> None:
    """One line per variant; ``delta_psnr`` is relative to the first row."""
    base = rows[0].psnr_mean if rows else math.nan
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        for r in rows:
            c = r.config
            multiscale = len(c.scales) > 1
            wr.writerow([r.variant, 2 if c.two_stage else 1, "yes" if (c.two_stage and c.use_um) else "no",
                         "yes" if c.use_tam else "no", "yes" if multiscale else "no",
                         *(_fmt(r.psnr[t.value]) for t in DegradationKind),
                         _fmt(r.psnr_mean), _fmt(r.psnr_mean - base)])
