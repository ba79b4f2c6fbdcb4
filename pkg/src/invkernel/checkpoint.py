"""Checkpoint directories: one raw tensor per array plus a text index.

``index.txt`` holds one entry per line::

    format invkernel-checkpoint 1
    config {"image_channels": 3, ...}
    scalar step 200
    scalar lr 0x1.a36e2eb1c432dp-13
    tensor param s1.net.stem.w param/s1.net.stem.w.tensor 3,3,3,16
    tensor adam_m s1.net.stem.w adam_m/s1.net.stem.w.tensor 3,3,3,16

The raw tensor format is 3-D, so every array is stored as ``(1, 1, size)``
and the index records its real shape.  Float scalars are written with
``float.hex`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image_core import read_tensor, write_tensor
from .kpn_net import Model, ModelConfig, init_model

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "model_from_checkpoint"]

FORMAT_LINE = "format invkernel-checkpoint 1"
KINDS = ("param", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)


def _encode_scalar(v) -> str:
    if isinstance(v, bool):
        return f"bool {int(v)}"
    if isinstance(v, int):
        return f"int {v}"
    if isinstance(v, float):
        return f"float {v.hex()}"
    return "json " + json.dumps(v, sort_keys=True)


def _decode_scalar(text: str):
    kind, _, body = text.partition(" ")
    if kind == "bool":
        return bool(int(body))
    if kind == "int":
        return int(body)
    if kind == "float":
        return float.fromhex(body)
    if kind == "json":
        return json.loads(body)
    raise CheckpointError(f"unknown scalar encoding {kind!r}")


def save_checkpoint(path, model: Model, adam_m=None, adam_v=None, scalars=None, extra_files=()) -> Path:
    """Write a checkpoint directory, replacing any existing one at ``path``.

    ``extra_files`` are copied in verbatim (the trainer stores its log so far).
    """
    if np.dtype(model.config.dtype) != np.float32:
        raise CheckpointError("checkpoints store float32 tensors only")
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    lines = [FORMAT_LINE, "config " + json.dumps(model.config.as_dict(), sort_keys=True)]
    for key, value in sorted((scalars or {}).items()):
        lines.append(f"scalar {key} {_encode_scalar(value)}")
    groups = {"param": model.parameters(), "adam_m": adam_m or {}, "adam_v": adam_v or {}}
    for kind in KINDS:
        if groups[kind]:
            (tmp / kind).mkdir()
        for name in sorted(groups[kind]):
            arr = np.asarray(groups[kind][name])
            rel = f"{kind}/{name}.tensor"
            write_tensor(arr.reshape(1, 1, -1), tmp / rel)
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"tensor {kind} {name} {rel} {shape}")
    (tmp / "index.txt").write_text("\n".join(lines) + "\n")
    for f in extra_files:
        shutil.copyfile(f, tmp / Path(f).name)
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    index = path / "index.txt"
    if not index.is_file():
        raise CheckpointError(f"{path}: no index.txt")
    lines = index.read_text().splitlines()
    if not lines or lines[0] != FORMAT_LINE:
        raise CheckpointError(f"{index}: unrecognised format line")
    config = None
    groups = {k: {} for k in KINDS}
    scalars = {}
    for line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "config":
            d = json.loads(rest)
            for key in ("widths", "scales"):
                d[key] = tuple(d[key])
            config = ModelConfig(**d)
        elif tag == "scalar":
            key, _, val = rest.partition(" ")
            scalars[key] = _decode_scalar(val)
        elif tag == "tensor":
            kind, name, rel, shape = rest.split(" ")
            if kind not in groups:
                raise CheckpointError(f"unknown tensor kind {kind!r}")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            arr = read_tensor(path / rel)
            if arr.size != int(np.prod(dims)):
                raise CheckpointError(f"{name}: stored {arr.size} values, index says {dims}")
            groups[kind][name] = arr.reshape(dims)
        elif line.strip():
            raise CheckpointError(f"{index}: bad line {line!r}")
    if config is None:
        raise CheckpointError(f"{index}: missing config line")
    return Checkpoint(config, groups["param"], groups["adam_m"], groups["adam_v"], scalars)


def model_from_checkpoint(ckpt) -> Model:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = init_model(ckpt.config, seed=0)
    model.load_parameters(ckpt.params)
    return model
