"""Property suite: engine equivalence, pairwise vs summed coupling identity,
M=1 reduction and finite-difference gradient checks.

Every random instance is drawn from its own seed (``base_seed + i``), so a
failure can be replayed from the printed seed alone. Finite differences run
in extended precision (``np.longdouble``) so that the oracle's roundoff sits
well below the 1e-4 budget even on parameters with tiny gradients.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .blocks import block_post, block_post_backward, block_pre, block_pre_backward, coupled_layer_forward, init_block
from .config import FUSION_MODES, CoupledModelConfig
from .kernels import (
    DiagSsmParams,
    coupled_conv_output,
    coupled_parallel_scan,
    coupled_sequential_scan,
    coupled_step_full,
    coupled_step_summed,
    project_output,
    scan_backward,
    sequential_scan,
    uncoupled_conv_output,
    zoh,
    zoh_backward,
    zoh_discretize,
)
from .model import init_model, model_backward, model_forward, pad_modalities

__all__ = [
    "Sizes",
    "PropertyResult",
    "DEFAULT_TOLERANCES",
    "parse_sizes",
    "random_coupled_instance",
    "check_engine_equivalence",
    "check_pairwise_summed",
    "vanilla_block",
    "check_m1_reduction",
    "relative_error",
    "finite_difference",
    "op_gradient_errors",
    "model_gradient_errors",
    "check_gradients",
    "run_all",
]

DEFAULT_TOLERANCES = {
    "engine_equivalence": 1e-10,
    "pairwise_summed": 1e-12,
    "m1_reduction": 1e-12,
    "gradients": 1e-4,
}


@dataclass(frozen=True)
class Sizes:
    """Upper bounds for random instances."""

    L: int = 64
    N: int = 8
    E: int = 8
    M: int = 4
    B: int = 2


@dataclass
class PropertyResult:
    name: str
    max_dev: float
    seed: int  # instance that produced max_dev
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(self.max_dev <= self.tolerance)


def parse_sizes(text: str) -> Sizes:
    """``"L=16,N=4,M=2"`` -> :class:`Sizes` (unnamed fields keep defaults)."""
    fields = {f.name for f in dataclasses.fields(Sizes)}
    kw = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in fields:
            raise ValueError(f"bad size entry {part!r}; expected one of {sorted(fields)} as KEY=INT")
        n = int(val)
        if n < 1:
            raise ValueError(f"size {key} must be >= 1, got {n}")
        kw[key] = n
    return Sizes(**kw)


# ---------------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------------


def random_coupled_instance(rng: np.random.Generator, sizes: Sizes, time_invariant: bool = False):
    """Random stable coupled instance: ``(S, bx, h0, C)``.

    ``S_m = a_bar_m / M`` with ``a_bar`` in (0, 1), so the fused transition
    stays inside the unit interval.
    """
    M = int(rng.integers(1, sizes.M + 1))
    L = int(rng.integers(1, sizes.L + 1))
    N = int(rng.integers(1, sizes.N + 1))
    E = int(rng.integers(1, sizes.E + 1))
    B = int(rng.integers(1, sizes.B + 1))
    steps = 1 if time_invariant else L
    S = []
    for _ in range(M):
        a = rng.uniform(0.05, 0.999, size=(B, steps, E, N)) / M
        S.append(np.ascontiguousarray(np.broadcast_to(a, (B, L, E, N))))
    bx = [rng.normal(size=(B, L, E, N)) for _ in range(M)]
    h0 = [rng.normal(size=(B, E, N)) for _ in range(M)]
    C = rng.normal(size=(B, N))
    return S, bx, h0, C


def _maxabs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def _engine_instance_dev(seed: int, sizes: Sizes) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0

    # time-varying: reference stepping vs both scan engines
    S, bx, h0, C = random_coupled_instance(rng, sizes)
    f_ref, h_ref = coupled_sequential_scan(S, bx, h0)
    for engine in ("scan", "sequential"):
        f, h, _ = coupled_parallel_scan(S, bx, h0, engine=engine)
        worst = max(worst, _maxabs(f, f_ref), *(_maxabs(a, b) for a, b in zip(h, h_ref)))

    # time-invariant: both convolution paths vs scan + readout
    S, bx, h0, C = random_coupled_instance(rng, sizes, time_invariant=True)
    f, _, _ = coupled_parallel_scan(S, bx, h0)
    y_ref = np.einsum("blen,bn->ble", f, C)
    f0 = sum(h0[1:], h0[0].copy())
    for method in ("direct", "fft"):
        worst = max(worst, _maxabs(coupled_conv_output(S, bx, C, f0=f0, method=method), y_ref))

    # single chain with constant b_bar and varying input
    B, L, E, N = S[0].shape
    a = S[0] * len(S)
    b_bar = np.broadcast_to(rng.normal(size=(B, 1, E, N)), a.shape)
    x = rng.normal(size=(B, L, E))
    Ct = np.broadcast_to(C[:, None, :], (B, L, N))
    y_ref = project_output(sequential_scan(a, b_bar * x[..., None]), Ct)
    for method in ("direct", "fft"):
        worst = max(worst, _maxabs(uncoupled_conv_output(a, b_bar, Ct, x, method=method), y_ref))
    return worst


def _run_instances(name: str, fn: Callable[[int], float], n: int, seed: int, tol: float) -> PropertyResult:
    worst, worst_seed = -1.0, seed
    for i in range(n):
        dev = fn(seed + i)
        if dev > worst:
            worst, worst_seed = dev, seed + i
    return PropertyResult(name, worst, worst_seed, tol, n)


def check_engine_equivalence(n: int = 100, sizes: Sizes = Sizes(), seed: int = 0, tol: float | None = None) -> PropertyResult:
    tol = DEFAULT_TOLERANCES["engine_equivalence"] if tol is None else tol
    return _run_instances("engine_equivalence", lambda s: _engine_instance_dev(s, sizes), n, seed, tol)


def _pairwise_instance_dev(seed: int, sizes: Sizes) -> float:
    rng = np.random.default_rng(seed)
    S, bx, h0, _ = random_coupled_instance(rng, sizes)
    t = int(rng.integers(0, S[0].shape[1]))
    S_t = [s[:, t] for s in S]
    bx_t = [b[:, t] for b in bx]
    pairs = [[S_t[m] for m in range(len(S))] for _ in range(len(S))]
    full = coupled_step_full(h0, pairs, bx_t)
    summed = coupled_step_summed(h0, S_t, bx_t)
    return max(_maxabs(a, b) for a, b in zip(full, summed))


def check_pairwise_summed(n: int = 100, sizes: Sizes = Sizes(), seed: int = 0, tol: float | None = None) -> PropertyResult:
    tol = DEFAULT_TOLERANCES["pairwise_summed"] if tol is None else tol
    return _run_instances("pairwise_summed", lambda s: _pairwise_instance_dev(s, sizes), n, seed, tol)


# ---------------------------------------------------------------------------
# M = 1 reduction
# ---------------------------------------------------------------------------


def vanilla_block(params, prefix: str, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Plain selective-SSM block composed directly from the primitive ops."""
    p = lambda name: params[prefix + name]  # noqa: E731
    xn, _ = nc.layer_norm(x, p("norm.gamma"), p("norm.beta"), eps)
    u, _ = nc.linear(xn, p("W_u"))
    z, _ = nc.linear(xn, p("W_z"))
    uc, _ = nc.depthwise_conv1d_causal(u, p("conv"))
    up = nc.silu(uc)
    Bm, _ = nc.linear(up, p("W_B"))
    Cm, _ = nc.linear(up, p("W_C"))
    r, _ = nc.linear(up, p("W_dt_down"))
    dr, _ = nc.linear(r, p("W_dt_up"), p("dt_bias"))
    fac = zoh_discretize(DiagSsmParams(-np.exp(p("A_log")), nc.softplus(dr), Bm), up)
    h = sequential_scan(fac.a_bar, fac.b_bar_x)
    y = project_output(h, Cm)
    out, _ = nc.linear(y * nc.silu(z), p("W_T"))
    return out + x


def _m1_instance_dev(seed: int, sizes: Sizes) -> float:
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, sizes.L + 1))
    B = int(rng.integers(1, sizes.B + 1))
    raw = int(rng.integers(1, 6))
    D = int(rng.integers(1, 9))
    N = int(rng.integers(1, sizes.N + 1))
    cfg = CoupledModelConfig(
        n_modalities=1,
        raw_dims=(raw,),
        d_model=D,
        d_state=N,
        dt_rank_divisor=1 if N <= 2 * D else N,
        n_layers=1,
        d_conv=int(rng.integers(1, 5)),
    )
    store = init_model(cfg, seed)
    for v in store.params.values():
        v += rng.normal(scale=0.1, size=v.shape)
    P = store.params
    x = rng.normal(size=(B, L, raw))

    # layer level: coupled layer with one stream vs the vanilla block
    xp = rng.normal(size=(B, L, cfg.d_model))
    outs, _, _ = coupled_layer_forward(P, 0, [xp], [None], cfg, coupled=True, keep=False)
    worst = _maxabs(outs[0], vanilla_block(P, "layer0.m0.", xp, cfg.ln_eps))

    # model level: projection -> vanilla block -> mean pool -> head
    batch = pad_modalities([[x[i] for i in range(B)]])
    pred, _ = model_forward(P, cfg, batch, keep=False)
    h, _ = nc.linear(x, P["in.m0.W"], P["in.m0.b"])
    y = vanilla_block(P, "layer0.m0.", h, cfg.ln_eps)
    ref, _ = nc.linear(y.mean(axis=1), P["head.W"], P["head.b"])
    return max(worst, _maxabs(pred, ref[:, 0]))


def check_m1_reduction(n: int = 20, sizes: Sizes = Sizes(), seed: int = 0, tol: float | None = None) -> PropertyResult:
    tol = DEFAULT_TOLERANCES["m1_reduction"] if tol is None else tol
    return _run_instances("m1_reduction", lambda s: _m1_instance_dev(s, sizes), n, seed, tol)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def relative_error(num: np.ndarray, ana: np.ndarray) -> float:
    """Norm-wise relative error ``|num - ana| / max(|num|, |ana|)``."""
    num = np.asarray(num, dtype=np.float64)
    ana = np.asarray(ana, dtype=np.float64)
    scale = max(np.linalg.norm(num), np.linalg.norm(ana))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(num - ana) / scale)


def finite_difference(loss: Callable[[dict], float], arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss`` w.r.t. every array, in long double."""
    ext = {k: np.array(v, dtype=np.longdouble) for k, v in arrays.items()}
    out = {}
    for name, v in ext.items():
        g = np.zeros(v.shape, dtype=np.longdouble)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            lp = loss(ext)
            v[idx] = orig - h
            lm = loss(ext)
            v[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def _compare(num: dict, ana: dict) -> dict[str, float]:
    return {k: relative_error(num[k], ana[k]) for k in num}


def op_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Worst per-tensor relative error of every differentiable op."""
    rng = np.random.default_rng(seed)
    errs: dict[str, float] = {}

    def record(op: str, num: dict, ana: dict) -> None:
        errs[op] = max(_compare(num, ana).values())

    # linear
    a = {"x": rng.normal(size=(2, 3, 4)), "W": rng.normal(size=(4, 3)), "b": rng.normal(size=3)}
    G = rng.normal(size=(2, 3, 3))
    out, c = nc.linear(a["x"], a["W"], a["b"])
    dx, dW, db = nc.linear_backward(G, c)
    record("linear", finite_difference(lambda t: (nc.linear(t["x"], t["W"], t["b"])[0] * G).sum(), a), {"x": dx, "W": dW, "b": db})

    # layer norm
    a = {"x": rng.normal(size=(2, 3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
    G = rng.normal(size=(2, 3, 5))
    _, c = nc.layer_norm(a["x"], a["g"], a["b"])
    dx, dg, db = nc.layer_norm_backward(G, c)
    record("layer_norm", finite_difference(lambda t: (nc.layer_norm(t["x"], t["g"], t["b"])[0] * G).sum(), a), {"x": dx, "g": dg, "b": db})

    # pointwise
    x = {"x": rng.normal(size=(3, 4)) * 3}
    G = rng.normal(size=(3, 4))
    record("silu", finite_difference(lambda t: (nc.silu(t["x"]) * G).sum(), x), {"x": nc.silu_backward(G, x["x"])})
    record("softplus", finite_difference(lambda t: (nc.softplus(t["x"]) * G).sum(), x), {"x": nc.softplus_backward(G, x["x"])})

    # causal depthwise conv
    a = {"x": rng.normal(size=(2, 6, 3)), "k": rng.normal(size=(3, 4))}
    G = rng.normal(size=(2, 6, 3))
    _, c = nc.depthwise_conv1d_causal(a["x"], a["k"])
    dx, dk = nc.depthwise_conv1d_causal_backward(G, c)
    record("depthwise_conv1d_causal", finite_difference(lambda t: (nc.depthwise_conv1d_causal(t["x"], t["k"])[0] * G).sum(), a), {"x": dx, "k": dk})

    # losses (targets kept away from the L1 kink)
    a = {"p": rng.normal(size=7)}
    target = a["p"] + rng.choice([-1.0, 1.0], size=7) * rng.uniform(0.1, 1.0, size=7)
    _, g = nc.l1_loss(a["p"], target)
    record("l1_loss", finite_difference(lambda t: nc.l1_loss(t["p"], target)[0], a), {"p": g})
    a = {"z": rng.normal(size=(5, 3))}
    labels = rng.integers(0, 3, size=5)
    _, g = nc.cross_entropy(a["z"], labels)
    record("cross_entropy", finite_difference(lambda t: nc.cross_entropy(t["z"], labels)[0], a), {"z": g})

    # zero-order hold, both the exp branch and the series branch
    for tag, dscale in (("zoh", 1.0), ("zoh_series", 1e-6)):
        a = {
            "A": -rng.uniform(0.5, 2.0, size=(3, 2)),
            "d": rng.uniform(0.1, 1.0, size=(1, 4, 3)) * dscale,
            "B": rng.normal(size=(1, 4, 2)),
            "x": rng.normal(size=(1, 4, 3)),
        }
        Ga = rng.normal(size=(1, 4, 3, 2))
        Gb = rng.normal(size=(1, 4, 3, 2))

        def zloss(t):
            ab, bx, _ = zoh(t["A"], t["d"], t["B"], t["x"])
            return (ab * Ga).sum() + (bx * Gb).sum()

        _, _, c = zoh(a["A"], a["d"], a["B"], a["x"])
        dA, dd, dB, dx = zoh_backward(Ga, Gb, c)
        # delta is perturbed on its own scale so the series branch stays active
        rest = {k: np.array(v, dtype=np.longdouble) for k, v in a.items() if k != "d"}
        num = finite_difference(zloss, a)
        num["d"] = finite_difference(lambda t: zloss({**rest, "d": t["d"]}), {"d": a["d"]}, h=1e-5 * dscale)["d"]
        record(tag, num, {"A": dA, "d": dd, "B": dB, "x": dx})

    # coupled scan (M=2, L=4, N=2) including the initial state
    M, B, L, E, N = 2, 1, 4, 2, 2
    a = {f"S{m}": rng.uniform(0.1, 0.5, size=(B, L, E, N)) for m in range(M)}
    a.update({f"X{m}": rng.normal(size=(B, L, E, N)) for m in range(M)})
    a.update({f"h{m}": rng.normal(size=(B, E, N)) for m in range(M)})
    Gs = [rng.normal(size=(B, L, E, N)) for _ in range(M)]

    def sloss(t):
        _, states, _ = coupled_parallel_scan(
            [t[f"S{m}"] for m in range(M)], [t[f"X{m}"] for m in range(M)], [t[f"h{m}"] for m in range(M)], engine="sequential"
        )
        return sum((s * g).sum() for s, g in zip(states, Gs))

    _, _, fprev = coupled_parallel_scan([a[f"S{m}"] for m in range(M)], [a[f"X{m}"] for m in range(M)], [a[f"h{m}"] for m in range(M)])
    dS, dX, dh0 = scan_backward([a[f"S{m}"] for m in range(M)], fprev, Gs)
    ana = {f"S{m}": dS[m] for m in range(M)}
    ana.update({f"X{m}": dX[m] for m in range(M)})
    ana.update({f"h{m}": dh0 for m in range(M)})
    record("coupled_scan", finite_difference(sloss, a), ana)

    errs["block"] = _block_gradient_error(rng)
    return errs


def _block_gradient_error(rng: np.random.Generator) -> float:
    """Single block on the tiny config B=1, L=3, D=4, E=8, N=2."""
    cfg = CoupledModelConfig(n_modalities=1, raw_dims=(4,), d_model=4, expand=2, d_state=2, dt_rank_divisor=1, dt_min=0.2, dt_max=1.0)
    store = nc.ParameterStore()
    init_block(store, "b.", cfg, rng)
    for v in store.params.values():
        v += rng.normal(scale=0.1, size=v.shape)
    arrays = dict(store.params)
    arrays["x"] = rng.normal(size=(1, 3, 4))
    G = rng.normal(size=(1, 3, 4))

    def run(t):
        pre = block_pre(t, "b.", t["x"])
        h = sequential_scan(pre.a_bar, pre.bx)
        out, post = block_post(t, "b.", t["x"], h, pre)
        return out, pre, post

    out, pre, post = run(arrays)
    grads: dict = {}
    dres, dh, dC, dz = block_post_backward(G, post, pre, grads, "b.")
    fprev = np.concatenate([np.zeros_like(pre.bx[:, :1]), sequential_scan(pre.a_bar, pre.bx)[:, :-1]], axis=1)
    dS, dX, _ = scan_backward([pre.a_bar], fprev, [dh])
    grads["x"] = block_pre_backward(dS[0], dX[0], dC, dz, pre, grads, "b.") + dres
    num = finite_difference(lambda t: (run(t)[0] * G).sum(), arrays)
    return max(_compare(num, grads).values())


def model_gradient_errors(seed: int = 0, fusions=FUSION_MODES, heads=("regression", "classification")) -> dict[str, float]:
    """End-to-end worst per-tensor relative error on a tiny model."""
    rng = np.random.default_rng(seed)
    errs = {}
    for fusion in fusions:
        for head in heads:
            cfg = CoupledModelConfig(
                n_modalities=2, raw_dims=(3, 2), d_model=4, expand=2, d_conv=3, d_state=2, dt_rank_divisor=1,
                n_layers=2, fusion=fusion, head=head, dt_min=0.2, dt_max=1.0,
            )
            store = init_model(cfg, seed)
            for v in store.params.values():
                v += rng.normal(scale=0.1, size=v.shape)
            seqs = [[rng.normal(size=(n, 3)) for n in (5, 3)], [rng.normal(size=(n, 2)) for n in (4, 5)]]
            batch = pad_modalities(seqs)
            w = rng.normal(size=(2,) if head == "regression" else (2, cfg.n_classes))
            ext_batch = batch.astype(np.longdouble)
            out, cache = model_forward(store.params, cfg, batch)
            ana = model_backward(w, cache)
            num = finite_difference(lambda t: (model_forward(t, cfg, ext_batch, keep=False)[0] * w).sum(), store.params)
            errs[f"model[{fusion},{head}]"] = max(_compare(num, ana).values())
    return errs


def check_gradients(seed: int = 0, tol: float | None = None, include_model: bool = True) -> PropertyResult:
    tol = DEFAULT_TOLERANCES["gradients"] if tol is None else tol
    errs = op_gradient_errors(seed)
    if include_model:
        errs.update(model_gradient_errors(seed))
    return PropertyResult("gradients", max(errs.values()), seed, tol, len(errs))


def run_all(
    tolerance: float | None = None,
    sizes: Sizes = Sizes(),
    n_instances: int = 100,
    seed: int = 0,
    gradients: bool = True,
) -> list[PropertyResult]:
    """Every property at its default tolerance (or ``tolerance`` for all)."""
    results = [
        check_engine_equivalence(n_instances, sizes, seed, tolerance),
        check_pairwise_summed(n_instances, sizes, seed, tolerance),
        check_m1_reduction(max(1, n_instances // 5), sizes, seed, tolerance),
    ]
    if gradients:
        results.append(check_gradients(seed, tolerance, include_model=False))
    return results
