"""Dense numeric core: forward ops with hand-written backward passes.

Tensors are plain contiguous ``numpy.ndarray`` values (row-major, float32 or
float64). Every differentiable op comes as a pair::

    out, cache = op(...)
    grads = op_backward(dout, cache)

No tape or graph is kept; callers chain the backward functions themselves.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "ParameterStore",
    "linear",
    "linear_backward",
    "layer_norm",
    "layer_norm_backward",
    "sigmoid",
    "silu",
    "silu_backward",
    "softplus",
    "softplus_backward",
    "depthwise_conv1d_causal",
    "depthwise_conv1d_causal_backward",
    "l1_loss",
    "cross_entropy",
    "adam_step",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Raised when tensor extents do not agree."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# affine / normalization
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, W: np.ndarray, bias: np.ndarray | None = None):
    """Affine map over the last axis: ``x @ W + bias``.

    ``x`` may carry any number of leading axes (usually ``[B, L]``).
    """
    _check(
        W.ndim == 2 and x.shape[-1] == W.shape[0],
        f"linear: x shape {x.shape} incompatible with W shape {W.shape}",
    )
    if bias is not None:
        _check(
            bias.shape == (W.shape[1],),
            f"linear: bias shape {bias.shape} does not match W shape {W.shape}",
        )
    out = x @ W
    if bias is not None:
        out = out + bias
    return out, (x, W, bias is not None)


def linear_backward(dout: np.ndarray, cache):
    x, W, has_bias = cache
    dx = dout @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dW, db


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis to zero mean and unit (population) variance."""
    D = x.shape[-1]
    _check(D >= 1, "layer_norm: empty feature axis")
    _check(
        gamma.shape == (D,) and beta.shape == (D,),
        f"layer_norm: x shape {x.shape} vs gamma {gamma.shape} / beta {beta.shape}",
    )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dout: np.ndarray, cache):
    xhat, rstd, gamma = cache
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dout * s * (1.0 + x * (1.0 - s))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * sigmoid(x)


# ---------------------------------------------------------------------------
# causal depthwise convolution
# ---------------------------------------------------------------------------


def depthwise_conv1d_causal(x: np.ndarray, kernels: np.ndarray):
    """Per-channel causal convolution along time.

    ``out[b, t, e] = sum_j kernels[e, j] * x[b, t - j, e]`` with zeros before
    the start of the sequence, so ``kernels[:, 0]`` weights the current step.
    """
    _check(x.ndim == 3, f"conv1d: expected x of rank 3 [B,L,E], got {x.shape}")
    _check(
        kernels.ndim == 2 and kernels.shape[0] == x.shape[2] and kernels.shape[1] >= 1,
        f"conv1d: kernels shape {kernels.shape} incompatible with x shape {x.shape}",
    )
    L = x.shape[1]
    k = kernels.shape[1]
    xp = np.concatenate([np.zeros((x.shape[0], k - 1, x.shape[2]), x.dtype), x], axis=1)
    out = np.zeros_like(x)
    for j in range(k):
        out += kernels[:, j] * xp[:, k - 1 - j : k - 1 - j + L, :]
    return out, (xp, kernels)


def depthwise_conv1d_causal_backward(dout: np.ndarray, cache):
    xp, kernels = cache
    k = kernels.shape[1]
    L = dout.shape[1]
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernels)
    for j in range(k):
        sl = slice(k - 1 - j, k - 1 - j + L)
        dk[:, j] = (dout * xp[:, sl, :]).sum(axis=(0, 1))
        dxp[:, sl, :] += dout * kernels[:, j]
    return dxp[:, k - 1 :, :], dk


# ---------------------------------------------------------------------------
# losses (return value and gradient with respect to the prediction)
# ---------------------------------------------------------------------------


def l1_loss(pred: np.ndarray, target: np.ndarray):
    _check(pred.shape == target.shape, f"l1_loss: pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    loss = np.abs(diff).sum() / n
    return float(loss), np.sign(diff) / n


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    _check(
        logits.ndim == 2 and labels.shape == (logits.shape[0],),
        f"cross_entropy: logits {logits.shape} vs labels {labels.shape}",
    )
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    idx = np.arange(n), labels.astype(np.int64)
    loss = -logp[idx].sum() / n
    grad = np.exp(logp)
    grad[idx] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named parameters with matching gradient buffers and Adam moments."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            buf = self.grads[name]
            _check(buf.shape == g.shape, f"gradient for {name}: {g.shape} vs {buf.shape}")
            buf += g

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.params.items():
            out.add(name, p.astype(dtype))
        return out

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "ParameterStore":
        store = cls()
        for name, value in load_tensors(path).items():
            store.add(name, value)
        return store


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParameterStore:
    """One decoupled-weight-decay Adam update, in place."""
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


_MAGIC = b"CSSM"
_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1, np.dtype(np.int64): 2}


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write the CSSM tensor container.

    Layout: ``b"CSSM"``, u32 version, u32 count, then per entry u32 name
    length, UTF-8 name, u32 rank, u8 dtype code, u64 extents, raw
    little-endian scalars.
    """
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<IB", arr.ndim, code))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a CSSM checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        rank, code = struct.unpack_from("<IB", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=off)
        out[name] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        off += size
    return out
