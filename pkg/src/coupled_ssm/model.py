"""N-layer multi-modal model with pooling head, and the fusion baselines.

Fusion modes:

* ``coupled``: M chains per layer share their summed state at every step.
* ``mamba``: the same M-block layers with coupling switched off; the
  modalities only meet after pooling.
* ``average`` / ``concat``: modalities are merged into one sequence up front
  (mean, or concatenation followed by a linear map) and run through a single
  uncoupled stack.
* ``cross_attention``: the Mamba layers are replaced by pairwise
  single-head cross-attention layers.

Every mode projects each modality to ``d_model``, mean-pools over valid time
steps, averages over streams and applies a linear head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .blocks import (
    coupled_layer_backward,
    coupled_layer_forward,
    cross_attention_backward,
    cross_attention_forward,
    init_block,
    init_cross_attention,
)
from .config import CoupledModelConfig
from .kernels import ConfigurationError

__all__ = [
    "ModalityBatch",
    "pad_modalities",
    "init_model",
    "model_forward",
    "model_backward",
    "predict",
    "average_fusion",
    "concat_fusion",
    "mamba_fusion",
    "cross_attention_fusion",
]


@dataclass
class ModalityBatch:
    """Per-modality inputs right-padded to a common length.

    ``xs[m]`` is ``[B, L, D_m]``; ``masks[m]`` is ``[B, L]`` with 1 on valid
    steps and 0 on padding.
    """

    xs: list[np.ndarray]
    masks: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.xs[0].shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.xs)

    @property
    def length(self) -> int:
        return self.xs[0].shape[1]

    def take(self, idx) -> "ModalityBatch":
        return ModalityBatch([x[idx] for x in self.xs], [m[idx] for m in self.masks])

    def astype(self, dtype) -> "ModalityBatch":
        return ModalityBatch([x.astype(dtype) for x in self.xs], [m.astype(dtype) for m in self.masks])


def pad_modalities(sequences: Sequence[Sequence[np.ndarray]], length: int | None = None) -> ModalityBatch:
    """Right-pad ``sequences[m][i]`` ([L_i, D_m]) into a :class:`ModalityBatch`."""
    L = length or max(s.shape[0] for seqs in sequences for s in seqs)
    xs, masks = [], []
    for seqs in sequences:
        D = seqs[0].shape[1]
        x = np.zeros((len(seqs), L, D))
        mask = np.zeros((len(seqs), L))
        for i, s in enumerate(seqs):
            x[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = 1.0
        xs.append(x)
        masks.append(mask)
    return ModalityBatch(xs, masks)


def init_model(cfg: CoupledModelConfig, seed: int = 0) -> nc.ParameterStore:
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = nc.ParameterStore()
    D = cfg.d_model
    for m, d_raw in enumerate(cfg.raw_dims):
        store.add(f"in.m{m}.W", rng.uniform(-1, 1, (d_raw, D)) / np.sqrt(d_raw))
        store.add(f"in.m{m}.b", np.zeros(D))
    if cfg.fusion == "concat":
        M = cfg.n_modalities
        store.add("fuse.W", rng.uniform(-1, 1, (M * D, D)) / np.sqrt(M * D))
        store.add("fuse.b", np.zeros(D))
    streams = cfg.n_modalities if cfg.fusion in ("coupled", "mamba") else 1
    for layer in range(cfg.n_layers):
        if cfg.fusion == "cross_attention":
            init_cross_attention(store, f"layer{layer}.attn.", D, rng)
        else:
            for m in range(streams):
                init_block(store, f"layer{layer}.m{m}.", cfg, rng)
    store.add("head.W", rng.uniform(-1, 1, (D, cfg.out_dim)) / np.sqrt(D))
    store.add("head.b", np.zeros(cfg.out_dim))
    return store


def _pool(y: np.ndarray, mask: np.ndarray):
    cnt = np.maximum(mask.sum(axis=1), 1.0)[:, None]
    return (y * mask[..., None]).sum(axis=1) / cnt, cnt


def _pool_backward(dpooled: np.ndarray, mask: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    return mask[..., None] * (dpooled / cnt)[:, None, :]


def model_forward(params, cfg: CoupledModelConfig, batch: ModalityBatch, keep: bool = True):
    """Predictions ``[B]`` (regression) or logits ``[B, C]``.

    With ``keep=False`` no backward cache is retained, so peak memory is the
    forward transient only.
    """
    M = cfg.n_modalities
    if batch.n_modalities != M:
        raise ConfigurationError(f"batch has {batch.n_modalities} modalities, config expects {M}")
    if batch.size == 0:
        raise ValueError("empty batch")
    masks = batch.masks
    proj, c_in = [], []
    for m in range(M):
        p, c = nc.linear(batch.xs[m], params[f"in.m{m}.W"], params[f"in.m{m}.b"])
        proj.append(p)
        c_in.append(c if keep else None)

    fusion = cfg.fusion
    layer_caches = []
    early = None
    if fusion in ("coupled", "mamba", "cross_attention"):
        streams, stream_masks = proj, list(masks)
    else:
        union = np.zeros_like(masks[0])
        for mk in masks:
            union = union + mk
        cnt = np.maximum(union, 1.0)
        umask = (union > 0).astype(proj[0].dtype)
        masked = [p * mk[..., None] for p, mk in zip(proj, masks)]
        if fusion == "average":
            seq = sum(masked[1:], masked[0].copy()) / cnt[..., None]
            early = (cnt,)
        else:
            seq, c_f = nc.linear(np.concatenate(masked, axis=-1), params["fuse.W"], params["fuse.b"])
            early = (c_f,) if keep else (None,)
        streams, stream_masks = [seq], [umask]

    for layer in range(cfg.n_layers):
        if fusion == "cross_attention":
            streams, c = cross_attention_forward(params, layer, streams, stream_masks, cfg.ln_eps, keep)
        else:
            streams, _, c = coupled_layer_forward(
                params, layer, streams, stream_masks, cfg, coupled=(fusion == "coupled"), keep=keep
            )
        if keep:
            layer_caches.append(c)

    pooled, cnts = [], []
    for y, mk in zip(streams, stream_masks):
        p, c = _pool(y, mk)
        pooled.append(p)
        cnts.append(c)
    feat = pooled[0].copy()
    for p in pooled[1:]:
        feat += p
    feat /= len(pooled)
    out, c_head = nc.linear(feat, params["head.W"], params["head.b"])
    if cfg.head == "regression":
        out = out[:, 0]
    cache = None
    if keep:
        cache = (cfg, batch, c_in, early, stream_masks, layer_caches, cnts, c_head)
    return out, cache


def model_backward(dout: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dL/d(predictions)."""
    cfg, batch, c_in, early, stream_masks, layer_caches, cnts, c_head = cache
    grads: dict[str, np.ndarray] = {}
    if cfg.head == "regression":
        dout = dout[:, None]
    dfeat, grads["head.W"], grads["head.b"] = nc.linear_backward(dout, c_head)
    n_streams = len(stream_masks)
    dpooled = dfeat / n_streams
    dstreams = [_pool_backward(dpooled, mk, cnt) for mk, cnt in zip(stream_masks, cnts)]

    for layer in reversed(range(cfg.n_layers)):
        c = layer_caches[layer]
        if cfg.fusion == "cross_attention":
            dstreams = cross_attention_backward(dstreams, c, grads)
        else:
            dstreams = coupled_layer_backward(dstreams, c, grads)

    M = cfg.n_modalities
    if cfg.fusion in ("coupled", "mamba", "cross_attention"):
        dproj = dstreams
    elif cfg.fusion == "average":
        (cnt,) = early
        dseq = dstreams[0] / cnt[..., None]
        dproj = [dseq * mk[..., None] for mk in batch.masks]
    else:
        (c_f,) = early
        dcat, grads["fuse.W"], grads["fuse.b"] = nc.linear_backward(dstreams[0], c_f)
        D = cfg.d_model
        dproj = [dcat[..., m * D : (m + 1) * D] * batch.masks[m][..., None] for m in range(M)]
    for m in range(M):
        _, grads[f"in.m{m}.W"], grads[f"in.m{m}.b"] = nc.linear_backward(dproj[m], c_in[m])
    return grads


def predict(params, cfg: CoupledModelConfig, batch: ModalityBatch, batch_size: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, batch.size, batch_size):
        idx = slice(start, start + batch_size)
        out, _ = model_forward(params, cfg, batch.take(idx), keep=False)
        outs.append(out)
    return np.concatenate(outs, axis=0)


def _with_fusion(cfg: CoupledModelConfig, fusion: str) -> CoupledModelConfig:
    return dataclasses.replace(cfg, fusion=fusion)


def average_fusion(params, cfg: CoupledModelConfig, batch: ModalityBatch):
    return model_forward(params, _with_fusion(cfg, "average"), batch, keep=False)[0]


def concat_fusion(params, cfg: CoupledModelConfig, batch: ModalityBatch):
    return model_forward(params, _with_fusion(cfg, "concat"), batch, keep=False)[0]


def mamba_fusion(params, cfg: CoupledModelConfig, batch: ModalityBatch):
    return model_forward(params, _with_fusion(cfg, "mamba"), batch, keep=False)[0]


def cross_attention_fusion(params, cfg: CoupledModelConfig, batch: ModalityBatch):
    return model_forward(params, _with_fusion(cfg, "cross_attention"), batch, keep=False)[0]
