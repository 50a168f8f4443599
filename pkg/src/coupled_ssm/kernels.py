"""State-space kernels: ZOH discretization, single and coupled recurrences,
and the three execution engines (sequential, associative scan, convolution).

Conventions: every per-step tensor carries batch on axis 0 and time on axis
1, followed by arbitrary lane axes (usually ``[E, N]``). States at a single
time step drop the time axis. The coupled recurrence across ``M`` modality
chains is::

    f[t-1]  = sum_m h_m[t-1]
    h_m[t]  = S_m[t] * f[t-1] + X_m[t]

so the fused state obeys the scalar recurrence ``f[t] = P[t] f[t-1] + U[t]``
with ``P = sum_m S_m`` and ``U = sum_m X_m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ParameterDomainError",
    "EngineCapabilityError",
    "ConfigurationError",
    "DiagSsmParams",
    "DiscretizedFactors",
    "ScanElement",
    "compose",
    "zoh",
    "zoh_backward",
    "zoh_discretize",
    "recurrence_step",
    "sequential_scan",
    "associative_scan",
    "scan",
    "project_output",
    "uncoupled_conv_kernel",
    "causal_conv",
    "uncoupled_conv_output",
    "coupled_step_summed",
    "coupled_step_full",
    "coupled_sequential_scan",
    "coupled_full_scan",
    "coupled_parallel_scan",
    "coupled_conv_output",
    "scan_backward",
]

SMALL_Z = 1e-4
FFT_THRESHOLD = 1024


class ParameterDomainError(ValueError):
    """Continuous SSM parameters outside the stable domain (A < 0, delta > 0)."""


class EngineCapabilityError(ValueError):
    """The requested engine cannot evaluate this input."""


class ConfigurationError(ValueError):
    """Inconsistent modality counts or state shapes."""


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


@dataclass
class DiagSsmParams:
    """Continuous diagonal SSM: A [E,N] < 0, delta [B,L,E] > 0,
    B_in / C_out [B,L,N]."""

    A: np.ndarray
    delta: np.ndarray
    B_in: np.ndarray
    C_out: np.ndarray | None = None

    def validate(self) -> None:
        if not np.all(self.A < 0):
            raise ParameterDomainError("A must be strictly negative")
        if not np.all(self.delta > 0):
            raise ParameterDomainError("delta must be strictly positive")


@dataclass
class DiscretizedFactors:
    a_bar: np.ndarray  # [B, L, E, N]
    b_bar_x: np.ndarray  # [B, L, E, N]


def _phi(z: np.ndarray, delta_e: np.ndarray, A: np.ndarray, em1: np.ndarray) -> np.ndarray:
    """(exp(delta*A) - 1) / A, with a series branch near z = delta*A = 0."""
    safe_A = np.where(A == 0, 1.0, A)
    out = em1 / safe_A
    small = np.abs(z) < SMALL_Z
    if small.any():
        zs = z[small]
        out[small] = np.broadcast_to(delta_e, z.shape)[small] * (1.0 + zs * (0.5 + zs / 6.0))
    return out


def zoh(A: np.ndarray, delta: np.ndarray, B_in: np.ndarray, x: np.ndarray):
    """Diagonal zero-order hold.

    Returns ``(a_bar, b_bar_x, cache)`` where ``a_bar = exp(delta*A)`` and
    ``b_bar_x = (exp(delta*A) - 1)/A * B_in * x`` on ``[B, L, E, N]``.
    """
    d = delta[..., None]
    z = d * A
    em1 = np.expm1(z)
    a_bar = np.exp(z)
    phi = _phi(z, d, A, em1)
    bx = B_in[:, :, None, :] * x[..., None]
    return a_bar, phi * bx, (A, d, z, a_bar, em1, phi, B_in, x, bx)


def zoh_backward(da_bar: np.ndarray | None, db_bar_x: np.ndarray, cache):
    """Gradients of the ZOH outputs with respect to ``A, delta, B_in, x``."""
    A, d, z, a_bar, em1, phi, B_in, x, bx = cache
    dphi = db_bar_x * bx
    dbx = db_bar_x * phi
    dB_in = np.einsum("blen,ble->bln", dbx, x)
    dx = np.einsum("blen,bln->ble", dbx, B_in)

    # d phi / d delta = exp(z); d phi / d A has a series branch near z = 0
    safe_A = np.where(A == 0, 1.0, A)
    dphi_dA = z * a_bar
    dphi_dA -= em1
    dphi_dA /= safe_A * safe_A
    small = np.abs(z) < SMALL_Z
    if small.any():
        zs = z[small]
        ds = np.broadcast_to(d, z.shape)[small]
        dphi_dA[small] = ds * ds * (0.5 + zs * (1.0 / 3.0 + zs / 8.0))

    g_delta = dphi * a_bar
    g_A = dphi * dphi_dA
    if da_bar is not None:
        t = da_bar * a_bar
        g_delta = g_delta + t * A
        g_A = g_A + t * d
    ddelta = g_delta.sum(axis=-1)
    dA = g_A.sum(axis=(0, 1))
    return dA, ddelta, dB_in, dx


def zoh_discretize(params: DiagSsmParams, x: np.ndarray, validate: bool = True) -> DiscretizedFactors:
    """ZOH for ``params`` driven by input ``x`` [B,L,E]."""
    if validate:
        params.validate()
    a_bar, bx, _ = zoh(params.A, params.delta, params.B_in, x)
    return DiscretizedFactors(a_bar, bx)


# ---------------------------------------------------------------------------
# single-chain engines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanElement:
    """The affine map ``h -> a*h + b``."""

    a: np.ndarray | float
    b: np.ndarray | float

    def __call__(self, h):
        return self.a * h + self.b

    def then(self, other: "ScanElement") -> "ScanElement":
        return compose(self, other)


def compose(first: ScanElement, second: ScanElement) -> ScanElement:
    """Apply ``first`` then ``second``: ``(a2*a1, a2*b1 + b2)``."""
    return ScanElement(second.a * first.a, second.a * first.b + second.b)


def recurrence_step(h_prev: np.ndarray, a: np.ndarray, bx: np.ndarray) -> np.ndarray:
    return a * h_prev + bx


def _zeros_state(a: np.ndarray) -> np.ndarray:
    return np.zeros((a.shape[0],) + a.shape[2:], dtype=a.dtype)


def sequential_scan(a: np.ndarray, bx: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Left-to-right recurrence over axis 1. Returns states for t = 1..L."""
    if a.shape != bx.shape:
        raise ValueError(f"sequential_scan: a {a.shape} vs bx {bx.shape}")
    h = _zeros_state(a) if h0 is None else h0
    out = np.empty_like(bx)
    for t in range(a.shape[1]):
        h = a[:, t] * h + bx[:, t]
        out[:, t] = h
    return out


def associative_scan(a: np.ndarray, bx: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Work-efficient (up-sweep / down-sweep) inclusive scan over axis 1.

    The time axis is padded to a power of two with identity elements
    ``(1, 0)``; each tree level is one vectorized update over all lanes.
    """
    if a.shape != bx.shape:
        raise ValueError(f"associative_scan: a {a.shape} vs bx {bx.shape}")
    L = a.shape[1]
    if L < 1:
        raise ValueError("associative_scan: empty sequence")
    n = 1 << (L - 1).bit_length()
    A = np.ones((n,) + a.shape[:1] + a.shape[2:], dtype=a.dtype)
    Bv = np.zeros_like(A)
    A[:L] = np.moveaxis(a, 1, 0)
    Bv[:L] = np.moveaxis(bx, 1, 0)
    a_t = A[:L].copy()
    b_t = Bv[:L].copy()

    # up-sweep: right node <- left subtree then right subtree
    d = 1
    while d < n:
        left = slice(d - 1, n, 2 * d)
        right = slice(2 * d - 1, n, 2 * d)
        Bv[right] = A[right] * Bv[left] + Bv[right]
        A[right] = A[right] * A[left]
        d *= 2

    # down-sweep to exclusive prefixes
    A[n - 1] = 1.0
    Bv[n - 1] = 0.0
    d = n // 2
    while d >= 1:
        left = slice(d - 1, n, 2 * d)
        right = slice(2 * d - 1, n, 2 * d)
        tA = A[left].copy()
        tB = Bv[left].copy()
        A[left] = A[right]
        Bv[left] = Bv[right]
        Bv[right] = tA * Bv[right] + tB
        A[right] = tA * A[right]
        d //= 2

    # inclusive prefix = exclusive prefix followed by own element
    inc_A = a_t * A[:L]
    inc_B = a_t * Bv[:L] + b_t
    if h0 is not None:
        inc_B = inc_B + inc_A * h0[None]
    return np.ascontiguousarray(np.moveaxis(inc_B, 0, 1))


_ENGINES = {"sequential": sequential_scan, "scan": associative_scan}


def scan(a, bx, h0=None, engine: str = "scan") -> np.ndarray:
    try:
        fn = _ENGINES[engine]
    except KeyError:
        raise ValueError(f"unknown scan engine {engine!r}; choose from {sorted(_ENGINES)}") from None
    return fn(a, bx, h0)


def project_output(h: np.ndarray, C: np.ndarray) -> np.ndarray:
    """``y[b,t,e] = sum_n C[b,t,n] h[b,t,e,n]``."""
    return np.einsum("blen,bln->ble", h, C)


# ---------------------------------------------------------------------------
# convolution engines (time-invariant factors only)
# ---------------------------------------------------------------------------


def _time_invariant(arr: np.ndarray, what: str) -> np.ndarray:
    """Return the single time slice of ``arr`` [B,L,...] or refuse."""
    first = arr[:, :1]
    if not np.array_equal(arr, np.broadcast_to(first, arr.shape)):
        raise EngineCapabilityError(
            f"{what} varies over time; the convolution engine needs time-invariant "
            "factors, use associative_scan for the selective case"
        )
    return arr[:, 0]


def uncoupled_conv_kernel(a_bar: np.ndarray, b_bar: np.ndarray, C: np.ndarray, L: int) -> np.ndarray:
    """Global kernel ``K[k] = sum_n C_n a_n^k b_n`` for k = 0..L-1.

    Factors have shape ``[..., N]`` (no time axis); returns ``[L, ...]``.
    """
    k = np.arange(L).reshape((L,) + (1,) * a_bar.ndim)
    powers = np.power(a_bar[None], k)
    return (C[None] * powers * b_bar[None]).sum(axis=-1)


def causal_conv(kernel: np.ndarray, x: np.ndarray, method: str = "auto") -> np.ndarray:
    """``y[t] = sum_{k<=t} kernel[k] x[t-k]`` along axis 0 (lanes broadcast).

    ``method="auto"`` sums directly up to ``FFT_THRESHOLD`` steps and uses
    the FFT above; ``"direct"`` and ``"fft"`` force one path.
    """
    if method not in ("auto", "direct", "fft"):
        raise ValueError(f"unknown conv method {method!r}")
    L = x.shape[0]
    if method == "fft" or (method == "auto" and L > FFT_THRESHOLD):
        nfft = 1 << (2 * L - 1).bit_length()
        y = np.fft.irfft(np.fft.rfft(kernel, nfft, axis=0) * np.fft.rfft(x, nfft, axis=0), nfft, axis=0)
        return y[:L]
    y = np.zeros(np.broadcast_shapes(kernel.shape, x.shape), dtype=np.result_type(kernel, x))
    for k in range(L):
        y[k:] += kernel[k] * x[: L - k]
    return y


def uncoupled_conv_output(a_bar: np.ndarray, b_bar: np.ndarray, C: np.ndarray, x: np.ndarray, method: str = "auto") -> np.ndarray:
    """Single-chain convolution engine from per-step factors.

    ``a_bar, b_bar`` are [B,L,E,N], ``C`` is [B,L,N], ``x`` is [B,L,E].
    Raises :class:`EngineCapabilityError` unless all factors are constant
    in time.
    """
    a0 = _time_invariant(a_bar, "a_bar")
    b0 = _time_invariant(b_bar, "b_bar")
    c0 = _time_invariant(C, "C")
    L = x.shape[1]
    K = uncoupled_conv_kernel(a0, b0, c0[:, None, :], L)  # [L, B, E]
    y = causal_conv(K, np.moveaxis(x, 1, 0), method)
    return np.ascontiguousarray(np.moveaxis(y, 0, 1))


# ---------------------------------------------------------------------------
# coupled recurrence
# ---------------------------------------------------------------------------


def _fixed_sum(arrs: Sequence[np.ndarray]) -> np.ndarray:
    acc = arrs[0].copy()
    for x in arrs[1:]:
        acc += x
    return acc


def _check_modalities(*groups: Sequence) -> int:
    M = len(groups[0])
    if M < 1:
        raise ConfigurationError("at least one modality is required")
    for g in groups[1:]:
        if len(g) != M:
            raise ConfigurationError(f"modality count mismatch: {M} vs {len(g)}")
    shape = np.shape(groups[0][0])
    for g in groups:
        for x in g:
            if np.shape(x) != shape:
                raise ConfigurationError(f"state shape mismatch: {shape} vs {np.shape(x)}")
    return M


def coupled_step_summed(states: Sequence[np.ndarray], S: Sequence[np.ndarray], bx: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One coupled transition: sum the states once, then transition per modality."""
    _check_modalities(states, S, bx)
    fused = _fixed_sum(states)
    return [s * fused + b for s, b in zip(S, bx)]


def coupled_step_full(states: Sequence[np.ndarray], A_pairs, bx: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Pairwise coupling: ``h_m = sum_i A_pairs[i][m] * h_i + bx_m``."""
    M = _check_modalities(states, bx)
    if len(A_pairs) != M or any(len(row) != M for row in A_pairs):
        raise ConfigurationError(f"A_pairs must be {M}x{M}")
    out = []
    for m in range(M):
        acc = A_pairs[0][m] * states[0]
        for i in range(1, M):
            acc = acc + A_pairs[i][m] * states[i]
        out.append(acc + bx[m])
    return out


def _initial_states(S: Sequence[np.ndarray], h0) -> list[np.ndarray]:
    if h0 is None:
        return [_zeros_state(S[0]) for _ in S]
    return list(h0)


def coupled_sequential_scan(S: Sequence[np.ndarray], bx: Sequence[np.ndarray], h0=None):
    """Reference engine: step :func:`coupled_step_summed` left to right.

    Returns ``(fused, states)`` with ``fused[:, t] = sum_m h_m[t]``.
    """
    _check_modalities(S, bx)
    h = _initial_states(S, h0)
    L = S[0].shape[1]
    states = [np.empty_like(b) for b in bx]
    fused = np.empty_like(bx[0])
    for t in range(L):
        h = coupled_step_summed(h, [s[:, t] for s in S], [b[:, t] for b in bx])
        for m, hm in enumerate(h):
            states[m][:, t] = hm
        fused[:, t] = _fixed_sum(h)
    return fused, states


def coupled_full_scan(A_pairs, bx: Sequence[np.ndarray], h0=None) -> list[np.ndarray]:
    """Sequential engine for pairwise coupling; ``A_pairs[i][m]`` is [B,L,...]."""
    h = _initial_states(bx, h0)
    L = bx[0].shape[1]
    states = [np.empty_like(b) for b in bx]
    for t in range(L):
        pairs = [[A_pairs[i][m][:, t] for m in range(len(bx))] for i in range(len(bx))]
        h = coupled_step_full(h, pairs, [b[:, t] for b in bx])
        for m, hm in enumerate(h):
            states[m][:, t] = hm
    return states


def coupled_parallel_scan(S: Sequence[np.ndarray], bx: Sequence[np.ndarray], h0=None, engine: str = "scan"):
    """Evaluate the coupled recurrence through its fused scalar recurrence.

    ``f[t] = P[t] f[t-1] + U[t]`` is scanned once (prefix products of ``P``
    stand in for its powers when ``P`` varies in time), then every chain is
    recovered as ``h_m[t] = S_m[t] f[t-1] + X_m[t]``.

    Returns ``(fused, states, fused_prev)``; ``fused_prev[:, t]`` is
    ``f[t-1]`` and is what the backward pass needs.
    """
    _check_modalities(S, bx)
    h = _initial_states(S, h0)
    f0 = _fixed_sum(h)
    P = _fixed_sum(S)
    U = _fixed_sum(bx)
    fused = scan(P, U, f0, engine=engine)
    fused_prev = np.concatenate([f0[:, None], fused[:, :-1]], axis=1)
    states = [s * fused_prev + b for s, b in zip(S, bx)]
    return fused, states, fused_prev


def coupled_conv_output(
    S: Sequence[np.ndarray], bx: Sequence[np.ndarray], C: np.ndarray, f0: np.ndarray | None = None, method: str = "auto"
) -> np.ndarray:
    """Fused output ``y[t] = C . sum_{i<=t} P^(t-i) U[i]`` by causal convolution.

    ``S``/``bx`` are per-step [B,L,E,N] lists; ``P = sum_m S_m`` and ``C``
    ([B,N] or [B,L,N]) must be time-invariant. The kernel is
    ``(C P^0, C P^1, ..., C P^(L-1))`` per state lane.
    """
    _check_modalities(S, bx)
    P = _time_invariant(_fixed_sum(S), "P")
    U = _fixed_sum(bx)
    if C.ndim == 3:
        C = _time_invariant(C, "C")
    L = U.shape[1]
    k = np.arange(L).reshape((L, 1, 1, 1))
    powers = np.power(P[None], k)  # [L, B, E, N]
    lanes = causal_conv(powers, np.moveaxis(U, 1, 0), method)  # [L, B, E, N]
    if f0 is not None:
        lanes = lanes + P[None] * powers * f0[None]
    y = np.einsum("lben,bn->lbe", lanes, C)
    return np.ascontiguousarray(np.moveaxis(y, 0, 1))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def scan_backward(S: Sequence[np.ndarray], fused_prev: np.ndarray, grads: Sequence[np.ndarray], engine: str = "scan"):
    """Adjoint of the coupled recurrence (``M = 1`` gives the plain scan).

    ``grads[m]`` is dL/dh_m[t] from the outputs alone. The adjoint of the
    fused state obeys the reversed recurrence
    ``mu[t-1] = P[t] mu[t] + sum_m S_m[t] grads_m[t]`` with ``mu[L] = 0``,
    and each chain's total adjoint is ``grads_m[t] + mu[t]``.

    Returns ``(dS, dbx, dh0)``; ``dh0`` is shared by all chains.
    """
    _check_modalities(S, grads)
    P = _fixed_sum(S)
    V = _fixed_sum([s * g for s, g in zip(S, grads)])
    rev = scan(P[:, ::-1], V[:, ::-1], None, engine=engine)
    mu_prev = rev[:, ::-1]  # mu[t-1] for t = 1..L
    mu = np.concatenate([mu_prev[:, 1:], np.zeros_like(mu_prev[:, :1])], axis=1)
    lam = [g + mu for g in grads]
    dS = [l * fused_prev for l in lam]
    return dS, lam, np.ascontiguousarray(mu_prev[:, 0])
