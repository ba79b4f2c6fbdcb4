"""Synthetic paired datasets and their line-delimited JSON manifests.

A dataset directory looks like::

    manifest.jsonl
    clean/<id>.png
    degraded/<id>.png
    aux/<id>_<map>.tensor

Each manifest line is one record; paths are relative to the manifest's
directory.  The aux tensors are the ground-truth maps (``R``, ``gain``, ``M``,
``S``, ``t``, ``A``) needed to rebuild the affine degradation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import degrade as dg
from .image_core import ImageFormatError, load_image, make_rng, quantize, read_tensor, save_image, write_tensor

__all__ = ["Record", "TASK_NAMES", "parse_size", "generate_dataset", "load_manifest", "write_manifest"]

TASK_NAMES = {k.value: k.name.lower() for k in dg.DegradationKind}
RAIN_MODES = ("additive", "gain")
DEGRADED_FORMATS = ("png", "tensor")


@dataclass
class Record:
    id: str
    task_id: int
    clean_path: str
    degraded_path: str
    aux_paths: dict = field(default_factory=dict)
    seed: int = 0
    params: str = ""
    root: Path = field(default=Path("."), repr=False, compare=False)

    def to_json(self) -> str:
        body = {
            "id": self.id,
            "task_id": self.task_id,
            "clean_path": self.clean_path,
            "degraded_path": self.degraded_path,
            "aux_paths": self.aux_paths,
            "seed": self.seed,
            "params": self.params,
        }
        return json.dumps(body, sort_keys=True)

    def load_clean(self) -> np.ndarray:
        return load_image(self.root / self.clean_path)

    def load_degraded(self) -> np.ndarray:
        return load_image(self.root / self.degraded_path)

    def load_aux(self) -> dict:
        return {k: read_tensor(self.root / p) for k, p in self.aux_paths.items()}

    def affine(self) -> dg.PerPixelAffine:
        aux = self.load_aux()
        if "A" in aux:
            aux["A"] = aux["A"].reshape(-1)
        return dg.to_affine(self.task_id, **aux)


def parse_size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"size must look like HxW, got {text!r}") from None
    if h < 3 or w < 3:
        raise ValueError(f"size {h}x{w} is below the 3x3 minimum")
    return h, w


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_manifest(path) -> list:
    """Parse a manifest; raises ``ValueError`` on an empty or malformed file."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = Record(d["id"], int(d["task_id"]), d["clean_path"], d["degraded_path"],
                             dict(d.get("aux_paths", {})), int(d.get("seed", 0)), d.get("params", ""), root)
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from None
            dg.DegradationKind.parse(rec.task_id)
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    return records


def _record_seed(seed: int, task: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, task, index]).generate_state(1, np.uint32)[0])


def _clean_source(clean_dir):
    if clean_dir is None:
        return None
    files = sorted(Path(clean_dir).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {clean_dir}")
    return files


def _clean_image(files, index, shape, rng):
    if files is None:
        return dg.procedural_texture(shape, rng)
    img = load_image(files[index % len(files)]).astype(np.float64)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = shape
    if img.shape[0] < h or img.shape[1] < w:
        raise ImageFormatError(f"{files[index % len(files)]}: smaller than {h}x{w}")
    top = int(rng.integers(0, img.shape[0] - h + 1))
    left = int(rng.integers(0, img.shape[1] - w + 1))
    return img[top:top + h, left:left + w]


def _degrade(task, J, rng, rec_seed, rain_mode):
    """Returns ``(I, aux maps, params text)``."""
    if task == dg.DegradationKind.RAIN:
        if rain_mode == "gain":
            p = dg.GainParams(seed=rec_seed)
            I, G = dg.apply_gain(J, p)
            return I, {"gain": G}, "mode=gain " + p.as_text()
        p = dg.RainParams(num_streaks=int(rng.integers(20, 61)), seed=rec_seed)
        _, R = dg.apply_rain(J, p)
        # keep only the part of each streak that survives 8-bit saturation
        R = np.minimum(R, 1.0 - J)
        return J + R, {"R": R}, "mode=additive " + p.as_text()
    if task == dg.DegradationKind.SNOW:
        p = dg.SnowParams(density=float(rng.uniform(0.05, 0.15)), seed=rec_seed)
        I, M, S = dg.apply_snow(J, p)
        return I, {"M": M, "S": S}, p.as_text()
    A = tuple(float(a) for a in rng.uniform(0.75, 0.95) + rng.uniform(-0.03, 0.03, J.shape[2]))
    p = dg.HazeParams(atmospheric_light=A, beta=float(rng.uniform(0.5, 1.5)),
                      depth=dg.procedural_depth(J.shape, rng))
    I, t = dg.apply_haze(J, p)
    return I, {"t": t, "A": np.asarray(A).reshape(1, 1, -1)}, p.as_text()


def generate_dataset(task, count: int, size, seed: int, out_dir, clean_dir=None,
                     rain_mode: str = "additive", degraded_format: str = "png") -> Path:
    """Write a synthetic dataset and return the manifest path.

    ``task`` is a task name/id or ``"all"``; with ``"all"`` the count is split
    evenly, any remainder going to the lowest task ids.  With
    ``degraded_format="tensor"`` degraded images skip 8-bit quantisation, so
    the stored pair satisfies its affine maps to float32 precision.
    """
    if degraded_format not in DEGRADED_FORMATS:
        raise ValueError(f"degraded format must be one of {DEGRADED_FORMATS}, got {degraded_format!r}")
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if rain_mode not in RAIN_MODES:
        raise ValueError(f"rain mode must be one of {RAIN_MODES}, got {rain_mode!r}")
    shape = parse_size(size) if isinstance(size, str) else tuple(size)
    if str(task).lower() == "all":
        kinds = list(dg.DegradationKind)
        per = [count // 3 + (1 if i < count % 3 else 0) for i in range(3)]
    else:
        kinds = [dg.DegradationKind.parse(task)]
        per = [count]
    files = _clean_source(clean_dir)
    out = Path(out_dir)
    for sub in ("clean", "degraded", "aux"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    records = []
    for kind, n in zip(kinds, per):
        name = TASK_NAMES[kind.value]
        for i in range(n):
            rec_seed = _record_seed(seed, kind.value, i)
            rng = make_rng(rec_seed)
            # degrade the 8-bit clean image so the stored pair obeys the affine maps
            J = quantize(_clean_image(files, i, shape, rng)) / 255.0
            I, aux, params = _degrade(kind, J, rng, rec_seed, rain_mode)
            rid = f"{name}_{i:05d}"
            ext = "png" if degraded_format == "png" else "tensor"
            rec = Record(rid, kind.value, f"clean/{rid}.png", f"degraded/{rid}.{ext}",
                         seed=rec_seed, params=params, root=out)
            save_image(J, out / rec.clean_path)
            if degraded_format == "png":
                save_image(I, out / rec.degraded_path)
            else:
                write_tensor(I, out / rec.degraded_path)
            for key, arr in aux.items():
                rel = f"aux/{rid}_{key}.tensor"
                write_tensor(arr, out / rel)
                rec.aux_paths[key] = rel
            records.append(rec)
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
