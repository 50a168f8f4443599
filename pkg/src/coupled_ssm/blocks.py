"""Coupled Mamba block, the M-block coupled layer, and a cross-attention layer.

A block is split around its state recurrence. ``block_pre`` runs
LayerNorm -> Linear_u / Linear_z -> causal conv + SiLU -> B, C, delta
projections -> ZOH and returns per-step transition/input factors;
``block_post`` reads the states out through C, gates with SiLU(z) and
applies Linear_T plus the residual. A coupled layer runs ``block_pre`` for
all M modality blocks, evaluates the coupled recurrence once, then
``block_post`` per block.

Parameter names are flat: ``layer{l}.m{m}.<name>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .config import CoupledModelConfig
from .kernels import coupled_parallel_scan, project_output, scan_backward, zoh, zoh_backward

__all__ = [
    "NonFiniteError",
    "init_block",
    "init_cross_attention",
    "coupling_scale",
    "block_pre",
    "block_post",
    "block_post_backward",
    "block_pre_backward",
    "block_forward",
    "coupled_layer_forward",
    "coupled_layer_backward",
    "cross_attention_forward",
    "cross_attention_backward",
]


class NonFiniteError(FloatingPointError):
    """An activation became NaN or infinite."""


def _finite(arr: np.ndarray, prefix: str, step: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{prefix.rstrip('.')}: non-finite values after {step!r}")
    return arr


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_block(store: nc.ParameterStore, prefix: str, cfg: CoupledModelConfig, rng: np.random.Generator) -> None:
    D, E, N, k, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
    store.add(prefix + "norm.gamma", np.ones(D))
    store.add(prefix + "norm.beta", np.zeros(D))
    store.add(prefix + "W_u", _uniform(rng, (D, E), 1 / math.sqrt(D)))
    store.add(prefix + "W_z", _uniform(rng, (D, E), 1 / math.sqrt(D)))
    store.add(prefix + "conv", _uniform(rng, (E, k), 1 / math.sqrt(k)))
    store.add(prefix + "W_B", _uniform(rng, (E, N), 1 / math.sqrt(E)))
    store.add(prefix + "W_C", _uniform(rng, (E, N), 1 / math.sqrt(E)))
    store.add(prefix + "W_dt_down", _uniform(rng, (E, r), 1 / math.sqrt(E)))
    store.add(prefix + "W_dt_up", _uniform(rng, (r, E), 1 / math.sqrt(r)))
    dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=E))
    store.add(prefix + "dt_bias", dt + np.log(-np.expm1(-dt)))  # softplus^-1
    store.add(prefix + "A_log", np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (E, 1))))
    store.add(prefix + "W_T", _uniform(rng, (E, D), 1 / math.sqrt(E)))


def init_cross_attention(store: nc.ParameterStore, prefix: str, d_model: int, rng: np.random.Generator) -> None:
    b = 1 / math.sqrt(d_model)
    store.add(prefix + "norm.gamma", np.ones(d_model))
    store.add(prefix + "norm.beta", np.zeros(d_model))
    for name in ("W_q", "W_k", "W_v", "W_o"):
        store.add(prefix + name, _uniform(rng, (d_model, d_model), b))


def coupling_scale(cfg: CoupledModelConfig, n_streams: int) -> float:
    return 1.0 / n_streams if cfg.coupling == "mean" else 1.0


# ---------------------------------------------------------------------------
# single block
# ---------------------------------------------------------------------------


@dataclass
class BlockPre:
    a_bar: np.ndarray  # [B, L, E, N]
    bx: np.ndarray  # [B, L, E, N]
    C: np.ndarray  # [B, L, N]
    z: np.ndarray  # [B, L, E]
    cache: tuple


def block_pre(params, prefix: str, x: np.ndarray, mask: np.ndarray | None = None, eps: float = 1e-5) -> BlockPre:
    """Everything in the block up to (and including) the discretization.

    ``mask`` [B, L] zeroes delta at padded steps, which makes them
    no-input, no-decay steps.
    """
    p = lambda name: params[prefix + name]  # noqa: E731
    xn, c_ln = nc.layer_norm(x, p("norm.gamma"), p("norm.beta"), eps)
    u, c_u = nc.linear(xn, p("W_u"))
    z, c_z = nc.linear(xn, p("W_z"))
    uc, c_conv = nc.depthwise_conv1d_causal(u, p("conv"))
    up = _finite(nc.silu(uc), prefix, "conv1d+silu")
    Bm, c_B = nc.linear(up, p("W_B"))
    Cm, c_C = nc.linear(up, p("W_C"))
    r, c_r1 = nc.linear(up, p("W_dt_down"))
    dr, c_r2 = nc.linear(r, p("W_dt_up"), p("dt_bias"))
    delta = _finite(nc.softplus(dr), prefix, "delta")
    if mask is not None:
        delta = delta * mask[..., None]
    A = -np.exp(p("A_log"))
    a_bar, bx, c_zoh = zoh(A, delta, Bm, up)
    _finite(bx, prefix, "zoh")
    cache = (c_ln, c_u, c_z, uc, c_conv, c_B, c_C, c_r1, c_r2, dr, mask, A, c_zoh)
    return BlockPre(a_bar, bx, Cm, z, cache)


def block_post(params, prefix: str, x: np.ndarray, h: np.ndarray, pre: BlockPre):
    """Read out states, gate, project and add the residual."""
    y = _finite(project_output(h, pre.C), prefix, "state readout")
    sz = nc.silu(pre.z)
    g = y * sz
    o, c_T = nc.linear(g, params[prefix + "W_T"])
    out = _finite(o + x, prefix, "Linear_T+residual")
    return out, (y, sz, c_T, h)


def block_post_backward(dout: np.ndarray, post_cache, pre: BlockPre, grads: dict, prefix: str):
    """Returns ``(dx_residual, dh, dC, dz)`` and writes ``W_T`` into ``grads``."""
    y, sz, c_T, h = post_cache
    dg, dW_T, _ = nc.linear_backward(dout, c_T)
    grads[prefix + "W_T"] = dW_T
    dy = dg * sz
    dz = nc.silu_backward(dg * y, pre.z)
    dh = dy[..., None] * pre.C[:, :, None, :]
    dC = np.einsum("ble,blen->bln", dy, h)
    return dout, dh, dC, dz


def block_pre_backward(da_bar, dbx, dC, dz, pre: BlockPre, grads: dict, prefix: str) -> np.ndarray:
    """Backward through ``block_pre``; returns dL/dx via the normalized path."""
    (c_ln, c_u, c_z, uc, c_conv, c_B, c_C, c_r1, c_r2, dr, mask, A, c_zoh) = pre.cache
    dA, ddelta, dBm, dup = zoh_backward(da_bar, dbx, c_zoh)
    grads[prefix + "A_log"] = dA * A
    if mask is not None:
        ddelta = ddelta * mask[..., None]
    ddr = nc.softplus_backward(ddelta, dr)
    dr1, grads[prefix + "W_dt_up"], grads[prefix + "dt_bias"] = nc.linear_backward(ddr, c_r2)
    dup_r, grads[prefix + "W_dt_down"], _ = nc.linear_backward(dr1, c_r1)
    dup_B, grads[prefix + "W_B"], _ = nc.linear_backward(dBm, c_B)
    dup_C, grads[prefix + "W_C"], _ = nc.linear_backward(dC, c_C)
    dup = dup + dup_r + dup_B + dup_C
    duc = nc.silu_backward(dup, uc)
    du, grads[prefix + "conv"] = nc.depthwise_conv1d_causal_backward(duc, c_conv)
    dxn_u, grads[prefix + "W_u"], _ = nc.linear_backward(du, c_u)
    dxn_z, grads[prefix + "W_z"], _ = nc.linear_backward(dz, c_z)
    dx, grads[prefix + "norm.gamma"], grads[prefix + "norm.beta"] = nc.layer_norm_backward(dxn_u + dxn_z, c_ln)
    return dx


def block_forward(params, prefix: str, x: np.ndarray, fused_prev: np.ndarray, kappa: float = 1.0, mask=None, eps: float = 1e-5):
    """One block driven by an externally supplied fused-state trace.

    ``fused_prev[:, t]`` is the sum over all coupled chains of the states at
    step t-1. Returns ``(y, states)`` with this block's states
    ``h[t] = kappa * a_bar[t] * fused_prev[t] + bx[t]``.
    """
    pre = block_pre(params, prefix, x, mask, eps)
    h = kappa * pre.a_bar * fused_prev + pre.bx
    y, _ = block_post(params, prefix, x, h, pre)
    return y, h


# ---------------------------------------------------------------------------
# coupled layer
# ---------------------------------------------------------------------------


def coupled_layer_forward(
    params,
    layer: int,
    xs: Sequence[np.ndarray],
    masks: Sequence[np.ndarray | None],
    cfg: CoupledModelConfig,
    coupled: bool = True,
    keep: bool = True,
):
    """Run the M blocks of one layer.

    With ``coupled`` the chains share the fused state at every step;
    otherwise each chain scans alone. Returns ``(outs, fused_trace, cache)``;
    ``fused_trace`` is ``[B, L, E, N]`` when coupled, else ``None``.
    """
    M = len(xs)
    prefixes = [f"layer{layer}.m{m}." for m in range(M)]
    pres = [block_pre(params, prefixes[m], xs[m], masks[m], cfg.ln_eps) for m in range(M)]
    if coupled:
        kappa = coupling_scale(cfg, M)
        S = [p.a_bar * kappa if kappa != 1.0 else p.a_bar for p in pres]
        fused, states, fused_prev = coupled_parallel_scan(S, [p.bx for p in pres], engine=cfg.engine)
        groups = [(list(range(M)), S, fused_prev)]
    else:
        fused = None
        states = [None] * M
        groups = []
        for m, p in enumerate(pres):
            _, st, fp = coupled_parallel_scan([p.a_bar], [p.bx], engine=cfg.engine)
            states[m] = st[0]
            groups.append(([m], [p.a_bar], fp))
    outs, posts = [], []
    for m in range(M):
        out, post = block_post(params, prefixes[m], xs[m], states[m], pres[m])
        outs.append(out)
        posts.append(post)
    cache = (prefixes, pres, posts, groups, coupled, coupling_scale(cfg, M), cfg.engine) if keep else None
    return outs, fused, cache


def coupled_layer_backward(douts: Sequence[np.ndarray], cache, grads: dict) -> list[np.ndarray]:
    prefixes, pres, posts, groups, coupled, kappa, engine = cache
    M = len(douts)
    dres, dhs, dCs, dzs = [], [], [], []
    for m in range(M):
        a, b, c, d = block_post_backward(douts[m], posts[m], pres[m], grads, prefixes[m])
        dres.append(a)
        dhs.append(b)
        dCs.append(c)
        dzs.append(d)
    da_bar = [None] * M
    dbx = [None] * M
    for members, S, fused_prev in groups:
        dS, dX, _ = scan_backward(S, fused_prev, [dhs[m] for m in members], engine=engine)
        scale = kappa if coupled else 1.0
        for j, m in enumerate(members):
            da_bar[m] = dS[j] * scale if scale != 1.0 else dS[j]
            dbx[m] = dX[j]
    dxs = []
    for m in range(M):
        dx = block_pre_backward(da_bar[m], dbx[m], dCs[m], dzs[m], pres[m], grads, prefixes[m])
        dxs.append(dx + dres[m])
    return dxs


# ---------------------------------------------------------------------------
# pairwise cross-attention layer (baseline)
# ---------------------------------------------------------------------------


def _contexts(m: int, M: int) -> list[int]:
    return [c for c in range(M) if c != m] or [m]


def cross_attention_forward(params, layer: int, xs, masks, eps: float = 1e-5, keep: bool = True):
    """Each stream attends (single head) to every other stream.

    ``out_m = x_m + mean_c softmax(q_m k_c^T / sqrt(D)) v_c W_o``; with a
    single stream it attends to itself. Scores are ``[B, L, L]`` per pair.
    """
    pf = f"layer{layer}.attn."
    M = len(xs)
    D = xs[0].shape[-1]
    scale = 1.0 / math.sqrt(D)
    qkv, lns = [], []
    for m in range(M):
        xn, c_ln = nc.layer_norm(xs[m], params[pf + "norm.gamma"], params[pf + "norm.beta"], eps)
        qkv.append((xn @ params[pf + "W_q"], xn @ params[pf + "W_k"], xn @ params[pf + "W_v"], xn))
        lns.append(c_ln)
    outs, pair_caches, accs = [], [], []
    for m in range(M):
        ctx = _contexts(m, M)
        acc = np.zeros_like(xs[m])
        for c in ctx:
            s = qkv[m][0] @ np.swapaxes(qkv[c][1], 1, 2)
            s *= scale
            if masks[c] is not None:
                s += ((masks[c] - 1.0) * 1e30)[:, None, :]
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            o = s @ qkv[c][2]
            o /= len(ctx)
            acc += o
            if keep:
                pair_caches.append((m, c, s, len(ctx)))
            del s
        accs.append(acc)
        outs.append(xs[m] + acc @ params[pf + "W_o"])
    weights = tuple(params[pf + k] for k in ("W_q", "W_k", "W_v", "W_o"))
    cache = (pf, weights, qkv, lns, accs, pair_caches, scale) if keep else None
    return outs, cache


def cross_attention_backward(douts, cache, grads: dict) -> list[np.ndarray]:
    pf, weights, qkv, lns, accs, pair_caches, scale = cache
    Wq, Wk, Wv, Wo = weights
    M = len(douts)

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    dq = [np.zeros_like(t[0]) for t in qkv]
    dk = [np.zeros_like(t[1]) for t in qkv]
    dv = [np.zeros_like(t[2]) for t in qkv]
    dWo = sum(flat(accs[m]).T @ flat(douts[m]) for m in range(M))
    dacc = [d @ Wo.T for d in douts]
    for m, c, p, n_ctx in pair_caches:
        do = dacc[m] / n_ctx
        dv[c] += np.swapaxes(p, 1, 2) @ do
        dp = do @ np.swapaxes(qkv[c][2], 1, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq[m] += ds @ qkv[c][1]
        dk[c] += np.swapaxes(ds, 1, 2) @ qkv[m][0]
    dWq = dWk = dWv = 0.0
    dgamma = dbeta = 0.0
    dxs = []
    for m in range(M):
        x2 = flat(qkv[m][3])
        dWq = dWq + x2.T @ flat(dq[m])
        dWk = dWk + x2.T @ flat(dk[m])
        dWv = dWv + x2.T @ flat(dv[m])
        dxn = dq[m] @ Wq.T + dk[m] @ Wk.T + dv[m] @ Wv.T
        dx, dg, db = nc.layer_norm_backward(dxn, lns[m])
        dgamma = dgamma + dg
        dbeta = dbeta + db
        dxs.append(dx + douts[m])
    grads[pf + "W_q"], grads[pf + "W_k"], grads[pf + "W_v"], grads[pf + "W_o"] = dWq, dWk, dWv, dWo
    grads[pf + "norm.gamma"], grads[pf + "norm.beta"] = dgamma, dbeta
    return dxs
