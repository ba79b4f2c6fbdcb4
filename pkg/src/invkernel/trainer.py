"""Training loop: mixed-task patch sampling, Adam with cosine decay, resumable checkpoints.

A run is fully determined by its config and manifests.  The data RNG state,
Adam moments and the partially accumulated log window all go into each
checkpoint, so resuming from step ``k`` reproduces the uninterrupted run
bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernel_engine as ke
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import TASK_NAMES, load_manifest
from .degrade import DegradationKind
from .fft import is_power_of_two
from .image_core import ShapeMismatch, flip_h, flip_v, write_tensor
from .kpn_net import Model, ModelConfig, NonFiniteActivation, backward, init_model, two_stage_forward
from .losses import LossWeights, total_loss
from .metrics import psnr

__all__ = [
    "TaskSource",
    "TrainConfig",
    "parse_config",
    "config_to_text",
    "model_config",
    "cosine_lr",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "TaskData",
    "load_sources",
    "Batch",
    "sample_batch",
    "probe_psnr",
    "TrainingDiverged",
    "TrainResult",
    "train",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "lr", "loss_c", "loss_e", "loss_f", "loss_total", "psnr_rain", "psnr_snow", "psnr_haze"]
MAX_BAD_STEPS = 3


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSource:
    task: int
    manifest: str
    weight: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    patch_size: int = 64
    scales: tuple = ke.DEFAULT_SCALES
    seed: int = 0
    task_mix: tuple = ()
    checkpoint_every: int = 500
    log_every: int = 100
    lr_start: float = 2e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    probe_count: int = 8
    out_dir: str = "run"
    widths: tuple = (16, 32, 64)
    embed_dim: int = 16
    tam_hidden: int = 32
    two_stage: bool = True
    use_tam: bool = True
    use_um: bool = True
    loss_freq: float = 0.1
    loss_edge: float = 0.05
    loss_eps: float = 1e-3

    def __post_init__(self):
        if not self.lr_start > self.lr_min > 0:
            raise ValueError("need lr_start > lr_min > 0")
        if not is_power_of_two(self.patch_size) or self.patch_size % 4:
            raise ValueError(f"patch_size must be a power of two divisible by 4, got {self.patch_size}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")
        if self.probe_count < 0:
            raise ValueError("probe_count must be >= 0")
        ke.check_scales(self.scales)
        if any(s.weight < 0 for s in self.task_mix):
            raise ValueError("task weights must be non-negative")
        if self.task_mix and sum(s.weight for s in self.task_mix) <= 0:
            raise ValueError("task weights sum to zero")


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _task_mix(text, base: Path):
    out = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        task, _, rest = entry.partition(":")
        path, sep, weight = rest.rpartition(":")
        if not sep or not path:
            raise ValueError(f"task_mix entry must be task:manifest:weight, got {entry!r}")
        p = Path(path)
        if not p.is_absolute():
            p = base / p
        out.append(TaskSource(int(DegradationKind.parse(task)), str(p), float(weight)))
    return tuple(out)


def parse_config(path, **overrides) -> TrainConfig:
    """Read a flat ``key = value`` file.  Relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        default = known[key].default
        try:
            if key == "task_mix":
                values[key] = _task_mix(val, base)
            elif key in ("scales", "widths"):
                values[key] = _ints(val)
            elif key == "out_dir":
                p = Path(val)
                values[key] = str(p if p.is_absolute() else base / p)
            elif isinstance(default, bool):
                values[key] = _bool(val)
            elif isinstance(default, int):
                values[key] = int(val)
            elif isinstance(default, float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {key}: {exc}") from None
    values.update(overrides)
    return TrainConfig(**values)


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "task_mix":
            v = ", ".join(f"{TASK_NAMES[s.task]}:{s.manifest}:{s.weight!r}" for s in v)
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def model_config(cfg: TrainConfig, image_channels: int = 3) -> ModelConfig:
    return ModelConfig(image_channels=image_channels, widths=tuple(cfg.widths), scales=tuple(cfg.scales),
                       embed_dim=cfg.embed_dim, tam_hidden=cfg.tam_hidden, two_stage=cfg.two_stage,
                       use_tam=cfg.use_tam, use_um=cfg.use_um)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.total_steps == 0:
        return cfg.lr_start
    return cfg.lr_min + 0.5 * (cfg.lr_start - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> bool:
    """Bias-corrected Adam, in place.  Returns ``False`` (and changes nothing)
    when any gradient is non-finite."""
    if set(grads) != set(params):
        raise KeyError("gradient names do not match parameters")
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: parameter {p.shape}, gradient {grads[k].shape}, moment {state.m[k].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at Adam step %d; update rejected", state.t + 1)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k in sorted(params):
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[k].dtype)
    return True


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    task: int
    weight: float
    train_ids: list
    degraded: list
    clean: list
    probe_ids: list = field(default_factory=list)
    probe_degraded: list = field(default_factory=list)
    probe_clean: list = field(default_factory=list)


def load_sources(cfg: TrainConfig) -> list:
    """Load every task source; the last ``probe_count`` records of each are held out."""
    if not cfg.task_mix:
        raise ValueError("config has no task_mix entries")
    out = []
    for src in cfg.task_mix:
        records = [r for r in load_manifest(src.manifest) if r.task_id == src.task]
        if not records:
            raise ValueError(f"{src.manifest}: no records for task {TASK_NAMES[src.task]}")
        if cfg.probe_count and len(records) <= cfg.probe_count:
            raise ValueError(f"{src.manifest}: {len(records)} records leave none for training "
                             f"after holding out {cfg.probe_count} probes")
        n_train = len(records) - cfg.probe_count
        train, probe = records[:n_train], records[n_train:]
        data = TaskData(src.task, src.weight, [r.id for r in train],
                        [r.load_degraded() for r in train], [r.load_clean() for r in train],
                        [r.id for r in probe], [r.load_degraded() for r in probe],
                        [r.load_clean() for r in probe])
        for d, c in zip(data.degraded, data.clean):
            if d.shape != c.shape or min(d.shape[:2]) < cfg.patch_size:
                raise ShapeMismatch(f"pair {d.shape}/{c.shape} cannot supply {cfg.patch_size}px patches")
        out.append(data)
    return out


@dataclass
class Batch:
    degraded: np.ndarray   # (N, P, P, C)
    clean: np.ndarray
    tasks: np.ndarray      # (N,)
    meta: list             # (task, record index, top, left, flip_h, flip_v) per item


def sample_batch(cfg: TrainConfig, sources: list, rng: np.random.Generator) -> Batch:
    weights = np.array([s.weight for s in sources], dtype=np.float64)
    if weights.sum() <= 0:
        raise ValueError("task weights sum to zero")
    weights /= weights.sum()
    p = cfg.patch_size
    deg, cln, tasks, meta = [], [], [], []
    for _ in range(cfg.batch_size):
        src = sources[int(rng.choice(len(sources), p=weights))]
        if not src.degraded:
            raise ValueError(f"task {TASK_NAMES[src.task]} has no training pairs")
        idx = int(rng.integers(len(src.degraded)))
        d, c = src.degraded[idx], src.clean[idx]
        top = int(rng.integers(0, d.shape[0] - p + 1))
        left = int(rng.integers(0, d.shape[1] - p + 1))
        fh = bool(rng.random() < 0.5)
        fv = bool(rng.random() < 0.5)
        dp, cp = d[top:top + p, left:left + p], c[top:top + p, left:left + p]
        if fh:
            dp, cp = flip_h(dp), flip_h(cp)
        if fv:
            dp, cp = flip_v(dp), flip_v(cp)
        deg.append(dp)
        cln.append(cp)
        tasks.append(src.task)
        meta.append((src.task, idx, top, left, fh, fv))
    return Batch(np.stack(deg), np.stack(cln), np.array(tasks, dtype=np.int64), meta)


def probe_psnr(model: Model, sources: list) -> dict:
    """Mean PSNR of the final restoration over each task's probe set (Y channel for rain)."""
    out = {}
    for src in sources:
        if not src.probe_degraded:
            continue
        mode = "y" if src.task == DegradationKind.RAIN else "rgb"
        scores = []
        for d, c in zip(src.probe_degraded, src.probe_clean):
            _, _, restored, _ = two_stage_forward(d, model, src.task)
            scores.append(psnr(np.clip(restored, 0.0, 1.0), c, mode=mode))
        out[src.task] = float(np.mean(scores))
    return out


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    final_checkpoint: Path
    log_path: Path
    rows: list


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else repr(float(v))


def _log_row(step, lr, window, count, probes):
    if count:
        parts = [window[k] / count for k in ("loss_c", "loss_e", "loss_f", "loss_total")]
    else:
        parts = [math.nan] * 4
    psnrs = [probes.get(t.value, math.nan) for t in DegradationKind]
    return [str(step), _fmt(lr)] + [_fmt(v) for v in parts] + [_fmt(v) for v in psnrs]


def _dump_diagnostics(out: Path, kernels, um) -> Path:
    d = out / "diverged"
    d.mkdir(parents=True, exist_ok=True)
    if kernels is not None:
        write_tensor(np.asarray(kernels[0], np.float32), d / "kernels_stage1.tensor")
        write_tensor(np.asarray(um[0] if um is not None else ke.uncertainty_map(kernels[0]), np.float32),
                     d / "um.tensor")
    return d


def train(cfg: TrainConfig, resume=None) -> TrainResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    log_path = out / "log.csv"
    sources = load_sources(cfg)
    channels = sources[0].degraded[0].shape[2] if sources[0].degraded else sources[0].probe_degraded[0].shape[2]
    mcfg = model_config(cfg, channels)
    model = init_model(mcfg, cfg.seed)
    params = model.parameters()
    adam = AdamState.zeros_like(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    weights = LossWeights(cfg.loss_freq, cfg.loss_edge, cfg.loss_eps)
    window = {"loss_c": 0.0, "loss_e": 0.0, "loss_f": 0.0, "loss_total": 0.0}
    count = 0
    bad = 0
    step = 0

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config != mcfg:
            raise ValueError(f"checkpoint model config {ck.config} does not match run config {mcfg}")
        model.load_parameters(ck.params)
        for k in params:
            adam.m[k][...] = ck.adam_m[k]
            adam.v[k][...] = ck.adam_v[k]
        s = ck.scalars
        step, adam.t, bad, count = s["step"], s["adam_t"], s["bad_steps"], s["window_count"]
        for k in window:
            window[k] = s[f"window_{k}"]
        rng.bit_generator.state = s["rng_state"]
        if s["total_steps"] != cfg.total_steps:
            raise ValueError("resuming with a different total_steps changes the schedule")
        shutil.copyfile(Path(resume) / "log.csv", log_path)
    else:
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(LOG_HEADER)
            wr.writerow(_log_row(0, cosine_lr(0, cfg), window, 0, probe_psnr(model, sources)))

    def checkpoint(at):
        scalars = {"step": at, "adam_t": adam.t, "bad_steps": bad, "window_count": count,
                   "rng_state": rng.bit_generator.state, "total_steps": cfg.total_steps,
                   "lr": cosine_lr(at, cfg), "seed": cfg.seed}
        for k, v in window.items():
            scalars[f"window_{k}"] = float(v)
        return save_checkpoint(ckpt_dir / f"step_{at:06d}", model, adam.m, adam.v, scalars, [log_path])

    last = checkpoint(step) if (resume is None and cfg.total_steps == 0) else None
    while step < cfg.total_steps:
        batch = sample_batch(cfg, sources, rng)
        lr = cosine_lr(step, cfg)
        kernels = um = None
        try:
            J1, UM1, J2, caches = two_stage_forward(batch.degraded, model, batch.tasks)
            kernels, um = caches.stage1.kernels, UM1
            outputs = [J1, J2] if cfg.two_stage else [J1]
            loss, gouts, parts = total_loss(outputs, batch.clean, weights)
        except NonFiniteActivation as exc:
            loss, kernels = math.nan, getattr(exc, "kernels", None)
        step += 1
        if not math.isfinite(loss):
            bad += 1
            log.warning("non-finite loss at step %d (%d in a row)", step, bad)
            if bad >= MAX_BAD_STEPS:
                d = _dump_diagnostics(out, kernels, um)
                raise TrainingDiverged(f"loss non-finite for {bad} consecutive steps; diagnostics in {d}")
        else:
            bad = 0
            grads = backward(caches, model, gouts[0], gouts[1] if cfg.two_stage else None)
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(params, grads, adam, lr)
            for k in ("loss_c", "loss_e", "loss_f"):
                window[k] += parts[k]
            window["loss_total"] += loss
            count += 1
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            row = _log_row(step, lr, window, count, probe_psnr(model, sources))
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
            window = dict.fromkeys(window, 0.0)
            count = 0
            log.info("step %d: %s", step, ",".join(row))
        if step % cfg.checkpoint_every == 0 or step == cfg.total_steps:
            last = checkpoint(step)
    if last is None:
        last = ckpt_dir / f"step_{step:06d}"
    with open(log_path, newline="") as fh:
        rows = list(csv.reader(fh))
    return TrainResult(Path(last), log_path, rows)
