"""Kernel prediction network and the two-stage restoration model.

The network is a two-level U-Net (stem, two stride-2 down blocks, a
bottleneck, two nearest-upsample up blocks with skip concatenation) ending
in two 1x1 heads: nine kernel taps and one fusion logit per scale.  The
kernel head adds a unit centre tap, so with zero heads every pixel gets the
identity kernel and the whole model is the identity map.

Stage 1 filters the degraded image.  Stage 2 predicts a new operator from
the stage-1 output concatenated with its uncertainty map and filters the
stage-1 output.  The stages share an architecture and the task embedding
table but keep separate weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import kernel_engine as ke
from .image_core import ShapeMismatch
from .layers import (conv1x1, conv1x1_backward, conv3x3, conv3x3_backward, edge_pad,
                     edge_pad_backward, gelu_grad, gelu_tanh, upsample2x, upsample2x_backward)
from .tam import (StaleCache, TaskEmbeddingTable, TamParams, init_embeddings, init_tam,
                  tam_backward, tam_forward)

__all__ = [
    "NonFiniteActivation",
    "ModelConfig",
    "StageParams",
    "Model",
    "init_net",
    "init_model",
    "net_forward",
    "net_backward",
    "stage_forward",
    "stage_backward",
    "two_stage_forward",
    "backward",
]


class NonFiniteActivation(FloatingPointError):
    """A forward pass produced NaN or Inf."""


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    widths: tuple = (16, 32, 64)
    scales: tuple = ke.DEFAULT_SCALES
    embed_dim: int = 16
    tam_hidden: int = 32
    num_tasks: int = 3
    two_stage: bool = True
    use_tam: bool = True
    use_um: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        ke.check_scales(self.scales)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"widths must be three positive ints, got {self.widths}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _conv_shapes(cin, widths):
    w0, w1, w2 = widths
    return {
        "stem": (cin, w0),
        "down1a": (w0, w1),
        "down1b": (w1, w1),
        "down2a": (w1, w2),
        "down2b": (w2, w2),
        "bottleneck": (w2, w2),
        "up1": (w2 + w1, w1),
        "up2": (w1 + w0, w0),
    }


def init_net(rng: np.random.Generator, in_channels: int, widths=(16, 32, 64),
             n_scales: int = 3, dtype=np.float32) -> dict:
    """Uniform +-sqrt(1/fan_in) conv weights, zero biases, zero heads."""
    p = {}
    for name, (cin, cout) in _conv_shapes(in_channels, widths).items():
        a = np.sqrt(1.0 / (9 * cin))
        p[f"{name}.w"] = rng.uniform(-a, a, (3, 3, cin, cout)).astype(dtype)
        p[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    w0 = widths[0]
    p["khead.w"] = np.zeros((w0, 9), dtype=dtype)
    p["khead.b"] = np.zeros(9, dtype=dtype)
    p["fhead.w"] = np.zeros((w0, n_scales), dtype=dtype)
    p["fhead.b"] = np.zeros(n_scales, dtype=dtype)
    return p


@dataclass
class StageParams:
    net: dict
    tam: TamParams
    embeddings: TaskEmbeddingTable
    index: int

    @property
    def in_channels(self) -> int:
        return self.net["stem.w"].shape[2]


@dataclass
class Model:
    config: ModelConfig
    embeddings: TaskEmbeddingTable
    stages: list = field(default_factory=list)

    def __post_init__(self):
        c = self.config.image_channels
        expected = [c, c + 1][: 2 if self.config.two_stage else 1]
        got = [sp.in_channels for sp in self.stages]
        if got != expected:
            raise ShapeMismatch(f"stage input channels {got}, expected {expected}")

    def parameters(self) -> dict:
        """Live references to every trainable array, keyed by a stable name."""
        out = {"embeddings": self.embeddings.entries}
        for sp in self.stages:
            prefix = f"s{sp.index}"
            for k, v in sp.net.items():
                out[f"{prefix}.net.{k}"] = v
            for f in fields(TamParams):
                out[f"{prefix}.tam.{f.name}"] = getattr(sp.tam, f.name)
        return out

    def load_parameters(self, values: dict) -> None:
        """Copy ``values`` into the live arrays in place; names and shapes must match."""
        live = self.parameters()
        if set(values) != set(live):
            missing = sorted(set(live) - set(values))
            extra = sorted(set(values) - set(live))
            raise KeyError(f"parameter mismatch; missing={missing} unexpected={extra}")
        for k, arr in live.items():
            src = np.asarray(values[k])
            if src.shape != arr.shape:
                raise ShapeMismatch(f"{k}: expected {arr.shape}, got {src.shape}")
            arr[...] = src


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = np.dtype(config.dtype)
    emb = init_embeddings(rng, config.num_tasks, config.embed_dim, dtype)
    c = config.image_channels
    n_s = len(config.scales)
    stages = [StageParams(init_net(rng, c, config.widths, n_s, dtype),
                          init_tam(rng, config.embed_dim, config.tam_hidden, dtype), emb, 1)]
    if config.two_stage:
        stages.append(StageParams(init_net(rng, c + 1, config.widths, n_s, dtype),
                                  init_tam(rng, config.embed_dim, config.tam_hidden, dtype), emb, 2))
    return Model(config, emb, stages)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class NetCache:
    size: tuple
    convs: dict
    acts: dict
    head_in: np.ndarray


def _conv_act(x, p, name, stride, cache):
    y, cc = conv3x3(x, p[f"{name}.w"], p[f"{name}.b"], stride)
    z, t = gelu_tanh(y)
    cache.convs[name] = (cc, y, t)
    return z


def _conv_act_backward(dz, p, name, cache, grads, need_dx=True):
    cc, y, t = cache.convs[name]
    dx, dw, db = conv3x3_backward(dz * gelu_grad(y, t), p[f"{name}.w"], cc, need_dx)
    grads[f"{name}.w"] = dw
    grads[f"{name}.b"] = db
    return dx


def net_forward(x: np.ndarray, p: dict):
    """``x`` is ``(N, H, W, Cin)``.  Returns ``(raw_kernels, fusion_logits, cache)``."""
    if x.ndim != 4:
        raise ShapeMismatch(f"net input must be (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    if c != p["stem.w"].shape[2]:
        raise ShapeMismatch(f"net expects {p['stem.w'].shape[2]} input channels, got {c}")
    xp = edge_pad(x, (-h) % 4, (-w) % 4)
    cache = NetCache(size=(h, w), convs={}, acts={}, head_in=None)
    h0 = _conv_act(xp, p, "stem", 1, cache)
    d1 = _conv_act(_conv_act(h0, p, "down1a", 2, cache), p, "down1b", 1, cache)
    d2 = _conv_act(_conv_act(d1, p, "down2a", 2, cache), p, "down2b", 1, cache)
    bt = _conv_act(d2, p, "bottleneck", 1, cache)
    u1 = _conv_act(np.concatenate([upsample2x(bt), d1], axis=-1), p, "up1", 1, cache)
    u2 = _conv_act(np.concatenate([upsample2x(u1), h0], axis=-1), p, "up2", 1, cache)
    cache.acts["bt_width"] = bt.shape[-1]
    cache.acts["u1_width"] = u1.shape[-1]
    cache.head_in = u2
    kraw = conv1x1(u2, p["khead.w"], p["khead.b"])
    kraw[..., ke.CENTER_TAP] += 1
    logits = conv1x1(u2, p["fhead.w"], p["fhead.b"])
    kraw, logits = kraw[:, :h, :w], logits[:, :h, :w]
    if not (np.all(np.isfinite(kraw)) and np.all(np.isfinite(logits))):
        err = NonFiniteActivation("kernel prediction produced non-finite values")
        err.kernels = kraw
        raise err
    return kraw, logits, cache


def net_backward(cache: NetCache, p: dict, d_kernels, d_logits, need_dx=True):
    """Returns ``(dx or None, grads)`` with ``grads`` keyed like ``p``."""
    h, w = cache.size
    u2 = cache.head_in
    hp, wp = u2.shape[1], u2.shape[2]
    pad = ((0, 0), (0, hp - h), (0, wp - w), (0, 0))
    dk = np.pad(d_kernels, pad)
    dl = np.pad(d_logits, pad)
    grads = {}
    du2, grads["khead.w"], grads["khead.b"] = conv1x1_backward(dk, u2, p["khead.w"])
    du2_f, grads["fhead.w"], grads["fhead.b"] = conv1x1_backward(dl, u2, p["fhead.w"])
    du2 = du2 + du2_f

    u1w = cache.acts["u1_width"]
    btw = cache.acts["bt_width"]
    d_in = _conv_act_backward(du2, p, "up2", cache, grads)
    du1, dh0 = upsample2x_backward(d_in[..., :u1w]), d_in[..., u1w:]
    d_in = _conv_act_backward(du1, p, "up1", cache, grads)
    dbt, dd1 = upsample2x_backward(d_in[..., :btw]), d_in[..., btw:]
    dd2 = _conv_act_backward(dbt, p, "bottleneck", cache, grads)
    dd2 = _conv_act_backward(dd2, p, "down2b", cache, grads)
    dd1 = dd1 + _conv_act_backward(dd2, p, "down2a", cache, grads)
    dd1 = _conv_act_backward(dd1, p, "down1b", cache, grads)
    dh0 = dh0 + _conv_act_backward(dd1, p, "down1a", cache, grads)
    dxp = _conv_act_backward(dh0, p, "stem", cache, grads, need_dx=need_dx)
    dx = edge_pad_backward(dxp, h, w) if need_dx else None
    return dx, grads


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

@dataclass
class StageCache:
    stage: StageParams
    image_channels: int
    scales: tuple
    net: NetCache
    tam: object
    kernels: np.ndarray      # modulated
    raw_kernels: np.ndarray
    alpha: np.ndarray
    samples: np.ndarray
    used: bool = False


def stage_forward(x: np.ndarray, sp: StageParams, task, scales, image_channels=None,
                  use_tam: bool = True):
    """One predict-modulate-filter pass.

    ``x`` is the network input, ``(H, W, C)`` or ``(N, H, W, C)``; the first
    ``image_channels`` channels are the image that gets filtered.  Returns
    ``(restored, uncertainty, cache)``.
    """
    scales = ke.check_scales(scales)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[-1] != sp.in_channels:
        raise ShapeMismatch(f"stage {sp.index} expects {sp.in_channels} channels, got {xb.shape[-1]}")
    c = xb.shape[-1] if image_channels is None else image_channels
    kraw, logits, ncache = net_forward(xb, sp.net)
    if len(scales) != logits.shape[-1]:
        raise ShapeMismatch(f"fusion head has {logits.shape[-1]} outputs for {len(scales)} scales")
    tcache = None
    if use_tam:
        tasks = np.broadcast_to(np.atleast_1d(np.asarray(task)), (xb.shape[0],))
        m, tcache = tam_forward(kraw, tasks, sp.embeddings, sp.tam)
        kern = kraw * m
    else:
        kern = kraw
    alpha = ke.softmax_fusion(logits)
    img = xb[..., :c]
    samples = ke.gather_samples(img, scales)
    out = ke.apply_multiscale_fast(samples, kern, alpha)
    um = ke.uncertainty_map(kern)
    cache = StageCache(sp, c, scales, ncache, tcache, kern, kraw, alpha, samples)
    if single:
        return out[0], um[0], cache
    return out, um, cache


def stage_backward(cache: StageCache, d_out, d_um=None, need_dx=True, tam_through_m=True):
    """Returns ``(dx or None, net_and_tam_grads, embedding_grads_by_task)``."""
    if cache.used:
        raise StaleCache(f"stage {cache.stage.index} cache already consumed")
    cache.used = True
    sp = cache.stage
    d_out = d_out[None] if d_out.ndim == 3 else d_out
    dkern, dalpha, dimg = ke.multiscale_backward(
        cache.samples, cache.kernels, cache.alpha, d_out, cache.scales if need_dx else None)
    if d_um is not None:
        d_um = d_um[None] if d_um.ndim == 3 else d_um
        dkern = dkern + ke.uncertainty_backward(cache.kernels, d_um)
    dlogits = ke.softmax_backward(cache.alpha, dalpha)
    grads = {}
    d_entries = {}
    if cache.tam is not None:
        dkraw, d_entries, dtam = tam_backward(cache.tam, dkern, sp.tam, through_m=tam_through_m)
        for f in fields(TamParams):
            grads[f"tam.{f.name}"] = getattr(dtam, f.name)
    else:
        dkraw = dkern
        for f in fields(TamParams):
            grads[f"tam.{f.name}"] = np.zeros_like(getattr(sp.tam, f.name))
    dx, gnet = net_backward(cache.net, sp.net, dkraw, dlogits, need_dx)
    for k, v in gnet.items():
        grads[f"net.{k}"] = v
    if need_dx:
        dx = dx.copy()
        dx[..., :cache.image_channels] += dimg
    return dx, grads, d_entries


# ---------------------------------------------------------------------------
# Two-stage composition
# ---------------------------------------------------------------------------

@dataclass
class ForwardCaches:
    stage1: StageCache
    stage2: StageCache | None
    batched: bool


def two_stage_forward(I: np.ndarray, model: Model, task, scales=None):
    """Returns ``(J1, UM1, J2, caches)``.  With one stage, ``J2`` is ``J1``."""
    cfg = model.config
    scales = cfg.scales if scales is None else ke.check_scales(scales)
    dtype = np.dtype(cfg.dtype)
    batched = I.ndim == 4
    x = (I if batched else I[None]).astype(dtype, copy=False)
    if x.shape[-1] != cfg.image_channels:
        raise ShapeMismatch(f"model expects {cfg.image_channels} channels, got {x.shape[-1]}")
    s1 = model.stages[0]
    J1, UM1, c1 = stage_forward(x, s1, task, scales, cfg.image_channels, cfg.use_tam)
    c2 = None
    J2 = J1
    if cfg.two_stage:
        um_in = UM1 if cfg.use_um else np.zeros_like(UM1)
        x2 = np.concatenate([J1, um_in], axis=-1)
        J2, _, c2 = stage_forward(x2, model.stages[1], task, scales, cfg.image_channels, cfg.use_tam)
    caches = ForwardCaches(c1, c2, batched)
    if batched:
        return J1, UM1, J2, caches
    return J1[0], UM1[0], J2[0], caches


def backward(caches: ForwardCaches, model: Model, d_j1=None, d_j2=None,
             um_path: bool = True, tam_through_m: bool = True) -> dict:
    """Gradients for every entry of ``model.parameters()``.

    ``d_j1``/``d_j2`` are the loss gradients for the two stage outputs
    (either may be ``None``).  For a one-stage model they add up on J1.
    """
    def batch(g):
        if g is None:
            return None
        return g if caches.batched else g[None]

    d_j1, d_j2 = batch(d_j1), batch(d_j2)
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    c = model.config.image_channels
    d_emb = grads["embeddings"]

    def collect(stage_idx, g, d_entries):
        for k, v in g.items():
            grads[f"s{stage_idx}.{k}"] += v
        for t, v in d_entries.items():
            d_emb[t] += v

    d_um1 = None
    if caches.stage2 is not None:
        if d_j2 is None:
            d_j2 = np.zeros(caches.stage2.samples.shape[:-3] + (c,), dtype=caches.stage2.samples.dtype)
        dx2, g2, e2 = stage_backward(caches.stage2, d_j2, need_dx=True, tam_through_m=tam_through_m)
        collect(2, g2, e2)
        d_img = dx2[..., :c]
        d_j1 = d_img if d_j1 is None else d_j1 + d_img
        if model.config.use_um and um_path:
            d_um1 = dx2[..., c:]
    elif d_j2 is not None:
        d_j1 = d_j2 if d_j1 is None else d_j1 + d_j2
    if d_j1 is None:
        d_j1 = np.zeros(caches.stage1.samples.shape[:-3] + (c,), dtype=caches.stage1.samples.dtype)
    _, g1, e1 = stage_backward(caches.stage1, d_j1, d_um1, need_dx=False, tam_through_m=tam_through_m)
    collect(1, g1, e1)
    return grads
