"""Command-line entry point: ``invkernel <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (bad data, missing files, divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernel_engine as ke
from .ablation import VARIANTS, run_ablation
from .bench import parse_scale_sets, run_bench, write_bench_csv
from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint
from .dataset import DEGRADED_FORMATS, RAIN_MODES, TASK_NAMES, generate_dataset, load_manifest, parse_size
from .degrade import DegradationKind
from .image_core import ImageFormatError, ShapeMismatch, TENSOR_MAGIC, load_image, save_image, write_tensor
from .kpn_net import two_stage_forward
from .metrics import evaluate, format_psnr
from .trainer import TrainingDiverged, config_to_text, parse_config, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DUMP_NAMES = ("j1.png", "um.png", "um.tensor", "kernels_stage1.tensor", "kernels_stage2.tensor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(title: str, settings: dict) -> None:
    print(f"# {title}")
    for k, v in settings.items():
        print(f"{k} = {v}")
    sys.stdout.flush()


def _task(text: str) -> int:
    try:
        return int(DegradationKind.parse(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size(text: str):
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sizes(text: str):
    return [_size(s) for s in text.split(",") if s.strip()]


def _scale_sets(text: str):
    try:
        return parse_scale_sets(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variants(text: str):
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    return names


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(a) -> int:
    if a.count <= 0:
        raise UsageError("gen: --count must be positive")
    _echo("gen", {"task": a.task, "count": a.count, "size": f"{a.size[0]}x{a.size[1]}", "seed": a.seed,
                  "out": a.out, "source": a.clean or "procedural", "rain_mode": a.rain_mode,
                  "degraded_format": a.degraded_format})
    manifest = generate_dataset(a.task, a.count, a.size, a.seed, a.out, clean_dir=a.clean,
                                rain_mode=a.rain_mode, degraded_format=a.degraded_format)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = parse_config(a.config)
    print("# train")
    print(config_to_text(cfg), end="")
    print(f"resume = {a.resume or ''}")
    res = train(cfg, resume=a.resume)
    print(f"final checkpoint {res.final_checkpoint}")
    print(f"log {res.log_path}")
    return EXIT_OK


def cmd_restore(a) -> int:
    _echo("restore", {"ckpt": a.ckpt, "task": TASK_NAMES[a.task], "in": a.input, "out": a.output,
                      "dump_intermediates": a.dump_intermediates or ""})
    model = model_from_checkpoint(a.ckpt)
    img = load_image(a.input)
    if img.shape[2] != model.config.image_channels:
        raise ShapeMismatch(f"{a.input} has {img.shape[2]} channels, checkpoint expects "
                            f"{model.config.image_channels}")
    J1, UM1, J2, caches = two_stage_forward(img, model, a.task)
    save_image(np.clip(J2, 0.0, 1.0), a.output)
    if a.dump_intermediates:
        d = Path(a.dump_intermediates)
        d.mkdir(parents=True, exist_ok=True)
        save_image(np.clip(J1, 0.0, 1.0), d / "j1.png")
        peak = float(UM1.max())
        save_image(UM1 / peak if peak > 0 else UM1, d / "um.png")
        write_tensor(UM1, d / "um.tensor")
        write_tensor(caches.stage1.kernels[0], d / "kernels_stage1.tensor")
        # a one-stage model passes J1 through unchanged, i.e. the identity field
        k2 = caches.stage2.kernels[0] if caches.stage2 is not None else ke.identity_kernel(*img.shape[:2])
        write_tensor(k2, d / "kernels_stage2.tensor")
    print(f"wrote {a.output}")
    return EXIT_OK


def cmd_eval(a) -> int:
    _echo("eval", {"ckpt": a.ckpt, "manifest": a.manifest, "mode": a.mode, "report": a.report})
    rep = evaluate(a.manifest, a.ckpt, a.mode, a.report)
    print(f"mean psnr_db = {format_psnr(rep.mean_psnr)}  mean ssim = {rep.mean_ssim:.6f}  "
          f"({len(rep.rows)} images)")
    return EXIT_OK


def _inspect_checkpoint(path: Path) -> None:
    ck = load_checkpoint(path)
    print(f"checkpoint {path}")
    print("config " + json.dumps(ck.config.as_dict()))
    for k in sorted(ck.scalars):
        if k != "rng_state":
            print(f"scalar {k} = {ck.scalars[k]}")
    total = 0
    for name in sorted(ck.params):
        arr = ck.params[name]
        total += arr.size
        print(f"param {name} {tuple(arr.shape)} mean|x|={float(np.abs(arr).mean()):.4g}")
    print(f"parameters {total}; adam moments {'present' if ck.adam_m else 'absent'}")


def _inspect_manifest(path: Path) -> None:
    records = load_manifest(path)
    counts = {}
    for r in records:
        counts[r.task_id] = counts.get(r.task_id, 0) + 1
    print(f"manifest {path}: {len(records)} records")
    for t in sorted(counts):
        print(f"task {t} ({TASK_NAMES[t]}): {counts[t]}")


def cmd_inspect(a) -> int:
    _echo("inspect", {"path": a.path})
    path = Path(a.path)
    if path.is_dir():
        _inspect_checkpoint(path)
        return EXIT_OK
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"\x89PNG") or head == TENSOR_MAGIC:
        img = load_image(path)
        print(f"raster {path}: shape {img.shape} min {img.min():.6g} max {img.max():.6g} "
              f"mean {img.mean():.6g}")
    else:
        _inspect_manifest(path)
    return EXIT_OK


def cmd_bench(a) -> int:
    _echo("bench", {"sizes": ",".join(f"{h}x{w}" for h, w in a.sizes),
                    "scales": ";".join(",".join(map(str, s)) for s in a.scales),
                    "reps": a.reps, "report": a.report or ""})
    if a.reps < 1:
        raise UsageError("bench: --reps must be >= 1")
    rows = run_bench(a.sizes, a.scales, a.reps)
    for r in rows:
        print(f"{r.h}x{r.w} scales={r.scales}: naive {r.naive_ms:.1f} ms, fast {r.fast_ms:.1f} ms, "
              f"speedup {r.speedup:.2f}, max|diff| {r.max_abs_diff:.2e}")
    if a.report:
        write_bench_csv(rows, a.report)
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg = parse_config(a.config)
    report = a.report or str(Path(cfg.out_dir) / "ablation.csv")
    print("# ablate")
    print(config_to_text(cfg), end="")
    print(f"variants = {','.join(a.variants)}")
    print(f"report = {report}")
    Path(report).parent.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, a.variants, report=report)
    for r in rows:
        print(f"{r.variant}: mean probe psnr {r.psnr_mean:.4f} dB")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invkernel", description="Task-aware kernel-prediction restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen", help="synthesise a paired dataset")
    g.add_argument("--task", required=True, choices=["rain", "snow", "haze", "all"])
    g.add_argument("--count", required=True, type=int)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW (default 64x64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--clean", metavar="DIR", help="crop clean images from PNGs in DIR")
    src.add_argument("--procedural", action="store_true", help="use procedural textures")
    g.add_argument("--rain-mode", choices=RAIN_MODES, default="additive")
    g.add_argument("--degraded-format", choices=DEGRADED_FORMATS, default="png")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True, type=_task, help="rain|snow|haze or 0|1|2")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", dest="output", required=True)
    r.add_argument("--dump-intermediates", metavar="DIR")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["auto", "rgb", "y"], default="auto")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarise a checkpoint, manifest, PNG or tensor")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time fast vs naive multi-scale filtering")
    b.add_argument("--sizes", type=_sizes, default=[(256, 256)], help="comma list of HxW")
    b.add_argument("--scales", type=_scale_sets, default=[(1, 2, 4), (1, 2, 16)],
                   help="semicolon list of scale sets, e.g. '1,2,4;1,2,16'")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)

    ab = sub.add_parser("ablate", help="train component ablations")
    ab.add_argument("--config", required=True)
    ab.add_argument("--variants", type=_variants, default=list(VARIANTS))
    ab.add_argument("--report")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, ImageFormatError, CheckpointError, ShapeMismatch,
            TrainingDiverged, FloatingPointError) as exc:
        print(f"invkernel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
