"""Task-aware modulation of predicted kernels.

A single scalar MLP is shared over every pixel and tap.  For tap weight
``k`` and task embedding ``e``::

    m = 2 * sigmoid(w2 . gelu(W1 @ [k; e] + b1) + b2)

so ``m`` lies in (0, 2) and equals 1 whenever the output layer is zero.
The modulated kernel is ``k * m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .image_core import ShapeMismatch
from .layers import gelu_grad, gelu_tanh

__all__ = [
    "TaskEmbeddingTable",
    "TamParams",
    "TamCache",
    "StaleCache",
    "init_embeddings",
    "init_tam",
    "modulation",
    "modulate",
    "tam_forward",
    "tam_backward",
]


class StaleCache(RuntimeError):
    """A forward cache was used for backward more than once."""


@dataclass
class TaskEmbeddingTable:
    entries: np.ndarray  # (num_tasks, d)

    @property
    def num_tasks(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def lookup(self, task) -> np.ndarray:
        ids = np.atleast_1d(np.asarray(task))
        if ids.dtype.kind not in "iu" or np.any(ids < 0) or np.any(ids >= self.num_tasks):
            raise KeyError(f"unknown task id {task!r}")
        return self.entries[ids]


@dataclass
class TamParams:
    w1: np.ndarray  # (h, 1 + d); column 0 multiplies the tap weight
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: np.ndarray  # (1,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def init_embeddings(rng: np.random.Generator, num_tasks=3, dim=16, dtype=np.float32):
    return TaskEmbeddingTable(rng.standard_normal((num_tasks, dim)).astype(dtype))


def init_tam(rng: np.random.Generator, dim=16, hidden=32, dtype=np.float32) -> TamParams:
    """First layer uniform in +-sqrt(1/fan_in); output layer zero so m == 1."""
    a = np.sqrt(1.0 / (1 + dim))
    return TamParams(
        w1=rng.uniform(-a, a, (hidden, 1 + dim)).astype(dtype),
        b1=np.zeros(hidden, dtype=dtype),
        w2=np.zeros(hidden, dtype=dtype),
        b2=np.zeros(1, dtype=dtype),
    )


@dataclass
class TamCache:
    K: np.ndarray
    emb: np.ndarray     # (N, d) embedding per batch item
    pre: np.ndarray     # (..., H, W, 9, h)
    act: np.ndarray
    tanh: np.ndarray
    sig: np.ndarray     # sigmoid of the output pre-activation
    m: np.ndarray
    tasks: np.ndarray
    used: bool = False


def _batched_embedding(K, emb):
    # emb (N, d) -> broadcastable against (N, H, W, 9, h); unbatched K uses row 0
    extra = K.ndim - 3
    if extra == 0:
        return emb[0]
    return emb.reshape(emb.shape[:1] + (1,) * 3 + emb.shape[1:])


def tam_forward(K, task, table: TaskEmbeddingTable, params: TamParams):
    """Modulation field and the cache needed for :func:`tam_backward`.

    ``task`` is a single id for an unbatched ``(H, W, 9)`` field or one id
    per item for ``(N, H, W, 9)``.
    """
    tasks = np.atleast_1d(np.asarray(task))
    emb = table.lookup(tasks)
    if K.ndim == 4 and len(tasks) not in (1, K.shape[0]):
        raise ShapeMismatch(f"{len(tasks)} task ids for a batch of {K.shape[0]}")
    if K.ndim == 4 and len(tasks) == 1:
        emb = np.repeat(emb, K.shape[0], axis=0)
        tasks = np.repeat(tasks, K.shape[0])
    ctx = emb @ params.w1[:, 1:].T + params.b1                      # (N, h)
    pre = K[..., None] * params.w1[:, 0] + _batched_embedding(K, ctx)
    act, t = gelu_tanh(pre)
    u = act @ params.w2 + params.b2[0]
    sig = expit(u)
    m = 2.0 * sig
    return m, TamCache(K=K, emb=emb, pre=pre, act=act, tanh=t, sig=sig, m=m, tasks=tasks)


def modulation(K, task, table: TaskEmbeddingTable, params: TamParams) -> np.ndarray:
    return tam_forward(K, task, table, params)[0]


def modulate(K: np.ndarray, m: np.ndarray) -> np.ndarray:
    if K.shape != m.shape:
        raise ShapeMismatch(f"kernel field {K.shape} vs modulation {m.shape}")
    return K * m


def tam_backward(cache: TamCache, d_mod_kernel: np.ndarray, params: TamParams,
                 through_m: bool = True):
    """Backward of ``K * m(K, e_t)``.

    Returns ``(dK, d_entries_by_task, dparams)`` where ``d_entries_by_task``
    maps task id to the gradient of its embedding row.  ``through_m=False``
    drops the path from K into the MLP input (used to show both paths matter).
    """
    if cache.used:
        raise StaleCache("TAM cache already consumed")
    cache.used = True
    K = cache.K
    dK = d_mod_kernel * cache.m
    dm = d_mod_kernel * K
    du = dm * 2.0 * cache.sig * (1.0 - cache.sig)                  # (..., 9)
    dw2 = np.tensordot(du, cache.act, axes=(tuple(range(du.ndim)), tuple(range(du.ndim))))
    db2 = np.array([du.sum()], dtype=params.b2.dtype)
    dpre = (du[..., None] * params.w2) * gelu_grad(cache.pre, cache.tanh)      # (..., 9, h)
    dw1 = np.zeros_like(params.w1)
    dw1[:, 0] = np.tensordot(dpre, K, axes=(tuple(range(K.ndim)), tuple(range(K.ndim))))
    if K.ndim == 4:
        dctx = dpre.sum(axis=(1, 2, 3))                              # (N, h)
    else:
        dctx = dpre.sum(axis=(0, 1, 2))[None]
    dw1[:, 1:] = dctx.T @ cache.emb
    db1 = dctx.sum(axis=0)
    demb = dctx @ params.w1[:, 1:]                                   # (N, d)
    if through_m:
        dK = dK + dpre @ params.w1[:, 0]
    d_entries = {}
    for n, t in enumerate(cache.tasks[: demb.shape[0]]):
        t = int(t)
        d_entries[t] = d_entries[t] + demb[n] if t in d_entries else demb[n].copy()
    return dK, d_entries, TamParams(w1=dw1, b1=db1, w2=dw2, b2=db2)
