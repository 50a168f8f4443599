import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupled_ssm.kernels import (
    ConfigurationError,
    DiagSsmParams,
    EngineCapabilityError,
    ParameterDomainError,
    ScanElement,
    associative_scan,
    causal_conv,
    compose,
    coupled_conv_output,
    coupled_full_scan,
    coupled_parallel_scan,
    coupled_sequential_scan,
    coupled_step_full,
    coupled_step_summed,
    project_output,
    recurrence_step,
    scan,
    scan_backward,
    sequential_scan,
    uncoupled_conv_kernel,
    uncoupled_conv_output,
    zoh,
    zoh_discretize,
)
from coupled_ssm.verify import Sizes, random_coupled_instance

seeds = st.integers(0, 2**32 - 1)


def _scalar_zoh(a, delta, b, x):
    A = np.array([[a]])
    d = np.array([[[delta]]])
    ab, bx, _ = zoh(A, d, np.array([[[b]]]), np.array([[[x]]]))
    return float(ab.ravel()[0]), float(bx.ravel()[0])


def test_zoh_scalar_oracle():
    ab, bx = _scalar_zoh(-1.0, 0.1, 1.0, 1.0)
    assert abs(ab - math.exp(-0.1)) <= 1e-15
    assert abs(bx - (1 - math.exp(-0.1))) <= 1e-15
    assert round(ab, 7) == 0.9048374 and round(bx, 7) == 0.0951626


def test_zoh_small_a_limit():
    _, bx = _scalar_zoh(-1e-9, 0.3, 2.0, 1.5)
    assert abs(bx - 0.3 * 2.0 * 1.5) / (0.3 * 2.0 * 1.5) <= 1e-6


def test_zoh_zero_delta():
    ab, bx = _scalar_zoh(-2.0, 0.0, 1.0, 1.0)
    assert ab == 1.0 and bx == 0.0


@given(st.floats(-3, -1e-6), st.floats(1e-6, 2.0))
@settings(max_examples=200, deadline=None)
def test_zoh_series_branch_is_continuous(a, delta):
    # both branches agree with a high-precision reference
    ref = math.expm1(a * delta) / a
    _, bx = _scalar_zoh(a, delta, 1.0, 1.0)
    assert abs(bx - ref) <= 1e-12 * max(1.0, abs(ref))


def test_zoh_domain_checks():
    p = DiagSsmParams(A=np.array([[0.5]]), delta=np.ones((1, 1, 1)), B_in=np.ones((1, 1, 1)))
    with pytest.raises(ParameterDomainError):
        zoh_discretize(p, np.ones((1, 1, 1)))
    p = DiagSsmParams(A=-np.ones((1, 1)), delta=np.zeros((1, 1, 1)), B_in=np.ones((1, 1, 1)))
    with pytest.raises(ParameterDomainError):
        zoh_discretize(p, np.ones((1, 1, 1)))


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_a_bar_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = DiagSsmParams(A=-rng.uniform(0.01, 50, (3, 4)), delta=rng.uniform(1e-4, 2, (2, 5, 3)), B_in=rng.normal(size=(2, 5, 4)))
    f = zoh_discretize(p, rng.normal(size=(2, 5, 3)))
    assert np.all((f.a_bar > 0) & (f.a_bar < 1))


def test_recurrence_step_examples():
    bx = np.array([0.3, -1.0])
    assert np.array_equal(recurrence_step(np.zeros(2), np.array([0.5, 0.2]), bx), bx)
    h = np.array([1.5, 2.0])
    assert np.array_equal(recurrence_step(h, np.ones(2), np.zeros(2)), h)


def test_three_step_closed_form():
    a, h0 = 0.7, 1.3
    b = np.array([0.2, -0.4, 0.9])
    out = sequential_scan(np.full((1, 3), a), b[None], np.array([h0]))
    ref = a**3 * h0 + a**2 * b[0] + a * b[1] + b[2]
    assert abs(out[0, -1] - ref) <= 1e-15


def test_memoryless_scan():
    bx = np.random.default_rng(0).normal(size=(2, 6, 3))
    for engine in ("scan", "sequential"):
        assert np.array_equal(scan(np.zeros_like(bx), bx, engine=engine), bx)


def test_l1_scan_is_one_step():
    rng = np.random.default_rng(1)
    a, bx, h0 = rng.uniform(size=(2, 1, 3)), rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 3))
    assert np.allclose(associative_scan(a, bx, h0)[:, 0], recurrence_step(h0, a[:, 0], bx[:, 0]), rtol=0, atol=1e-15)


def test_constant_factors_geometric():
    a, h0 = 0.9, 0.5
    b = np.random.default_rng(2).normal(size=8)
    out = associative_scan(np.full((1, 8), a), b[None], np.array([h0]))
    ref = a**8 * h0 + sum(a ** (8 - i) * b[i - 1] for i in range(1, 9))
    assert abs(out[0, -1] - ref) <= 1e-14


@given(seeds, st.integers(1, 64))
@settings(max_examples=60, deadline=None)
def test_scan_matches_sequential(seed, L):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=(2, L, 3, 4))
    bx = rng.normal(size=(2, L, 3, 4))
    h0 = rng.normal(size=(2, 3, 4))
    assert np.max(np.abs(associative_scan(a, bx, h0) - sequential_scan(a, bx, h0))) <= 1e-12


def test_unknown_engine():
    with pytest.raises(ValueError):
        scan(np.ones((1, 2)), np.ones((1, 2)), engine="warp")


def _elem(rng):
    return ScanElement(rng.uniform(-1, 1, 4), rng.normal(size=4))


@given(seeds)
@settings(max_examples=100, deadline=None)
def test_composition_associative(seed):
    rng = np.random.default_rng(seed)
    e1, e2, e3 = _elem(rng), _elem(rng), _elem(rng)
    left = compose(compose(e1, e2), e3)
    right = compose(e1, compose(e2, e3))
    assert np.max(np.abs(left.a - right.a)) <= 1e-12
    assert np.max(np.abs(left.b - right.b)) <= 1e-12


def test_composition_law_two_steps():
    rng = np.random.default_rng(5)
    e1, e2, h0 = _elem(rng), _elem(rng), rng.normal(size=4)
    assert np.allclose(e1.then(e2)(h0), e2(e1(h0)), rtol=0, atol=1e-15)


def test_conv_kernel_examples():
    K = uncoupled_conv_kernel(np.array([0.5]), np.array([1.0]), np.array([1.0]), 3)
    assert np.allclose(K.ravel(), [1.0, 0.5, 0.25])
    K = uncoupled_conv_kernel(np.array([0.0]), np.array([2.0]), np.array([3.0]), 4)
    assert np.array_equal(K.ravel(), [6.0, 0.0, 0.0, 0.0])


@given(seeds, st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_causal_conv_paths_agree(seed, L):
    rng = np.random.default_rng(seed)
    k, x = rng.normal(size=(L, 3)), rng.normal(size=(L, 3))
    ref = np.array([[sum(k[j, e] * x[t - j, e] for j in range(t + 1)) for e in range(3)] for t in range(L)])
    assert np.max(np.abs(causal_conv(k, x, "direct") - ref)) <= 1e-12
    assert np.max(np.abs(causal_conv(k, x, "fft") - ref)) <= 1e-10


def test_causal_conv_auto_uses_fft_for_long_inputs():
    rng = np.random.default_rng(6)
    k, x = 0.99 ** np.arange(1500.0), rng.normal(size=1500)
    assert np.max(np.abs(causal_conv(k, x) - causal_conv(k, x, "direct"))) <= 1e-10


def test_conv_engine_matches_scan():
    rng = np.random.default_rng(7)
    B, L, E, N = 2, 20, 3, 4
    a = np.broadcast_to(rng.uniform(0.1, 0.95, (B, 1, E, N)), (B, L, E, N))
    b = np.broadcast_to(rng.normal(size=(B, 1, E, N)), (B, L, E, N))
    C = np.broadcast_to(rng.normal(size=(B, 1, N)), (B, L, N))
    x = rng.normal(size=(B, L, E))
    ref = project_output(sequential_scan(a, b * x[..., None]), C)
    assert np.max(np.abs(uncoupled_conv_output(a, b, C, x) - ref)) <= 1e-10


def test_conv_engine_refuses_time_varying():
    rng = np.random.default_rng(8)
    a = rng.uniform(0.1, 0.9, (1, 5, 2, 2))
    b = np.ones_like(a)
    with pytest.raises(EngineCapabilityError):
        uncoupled_conv_output(a, b, np.ones((1, 5, 2)), np.ones((1, 5, 2)))
    with pytest.raises(EngineCapabilityError):
        coupled_conv_output([a], [b], np.ones((1, 2)))


# coupled recurrence -------------------------------------------------------


def test_m1_summed_step_is_plain_step():
    rng = np.random.default_rng(9)
    h, S, bx = rng.normal(size=(2, 3)), rng.uniform(size=(2, 3)), rng.normal(size=(2, 3))
    (out,) = coupled_step_summed([h], [S], [bx])
    assert np.array_equal(out, recurrence_step(h, S, bx))


def test_symmetric_modalities_stay_equal():
    rng = np.random.default_rng(10)
    h = rng.normal(size=3)
    S = rng.uniform(size=3) / 2
    bx = rng.normal(size=3)
    states = [h.copy(), h.copy()]
    first = coupled_step_summed(states, [S, S], [bx, bx])
    assert np.allclose(first[0], S * 2 * h + bx, rtol=0, atol=1e-15)
    for _ in range(20):
        states = coupled_step_summed(states, [S, S], [bx, bx])
        assert np.array_equal(states[0], states[1])


def test_summed_step_loop_oracle():
    rng = np.random.default_rng(11)
    M, n = 3, 5
    h = [rng.normal(size=n) for _ in range(M)]
    S = [rng.uniform(size=n) for _ in range(M)]
    bx = [rng.normal(size=n) for _ in range(M)]
    out = coupled_step_summed(h, S, bx)
    for m in range(M):
        for i in range(n):
            ref = S[m][i] * sum(h[j][i] for j in range(M)) + bx[m][i]
            assert abs(out[m][i] - ref) <= 1e-12


def test_full_step_uniform_pairs_equals_summed():
    rng = np.random.default_rng(12)
    M = 4
    h = [rng.normal(size=(2, 3)) for _ in range(M)]
    S = [rng.uniform(size=(2, 3)) for _ in range(M)]
    bx = [rng.normal(size=(2, 3)) for _ in range(M)]
    full = coupled_step_full(h, [[S[m] for m in range(M)] for _ in range(M)], bx)
    summed = coupled_step_summed(h, S, bx)
    for f, s in zip(full, summed):
        assert np.max(np.abs(f - s)) <= 1e-12


def test_full_step_diagonal_decouples():
    rng = np.random.default_rng(13)
    M = 3
    h = [rng.normal(size=4) for _ in range(M)]
    a = [rng.uniform(size=4) for _ in range(M)]
    bx = [rng.normal(size=4) for _ in range(M)]
    pairs = [[a[m] if i == m else np.zeros(4) for m in range(M)] for i in range(M)]
    out = coupled_step_full(h, pairs, bx)
    for m in range(M):
        assert np.array_equal(out[m], recurrence_step(h[m], a[m], bx[m]))


def test_full_step_two_modality_loop_oracle():
    rng = np.random.default_rng(14)
    h = [rng.normal(size=3) for _ in range(2)]
    A = [[rng.uniform(size=3) for _ in range(2)] for _ in range(2)]
    bx = [rng.normal(size=3) for _ in range(2)]
    out = coupled_step_full(h, A, bx)
    for m in range(2):
        for k in range(3):
            ref = A[0][m][k] * h[0][k] + A[1][m][k] * h[1][k] + bx[m][k]
            assert abs(out[m][k] - ref) <= 1e-12


def test_modality_mismatch():
    with pytest.raises(ConfigurationError):
        coupled_step_summed([np.zeros(2)], [np.zeros(2), np.zeros(2)], [np.zeros(2)])
    with pytest.raises(ConfigurationError):
        coupled_step_summed([np.zeros(2), np.zeros(3)], [np.zeros(2), np.zeros(3)], [np.zeros(2), np.zeros(3)])
    with pytest.raises(ConfigurationError):
        coupled_step_full([np.zeros(2)] * 2, [[np.zeros(2)]], [np.zeros(2)] * 2)


def test_parallel_m1_is_plain_scan():
    rng = np.random.default_rng(15)
    a, bx = rng.uniform(size=(2, 9, 3)), rng.normal(size=(2, 9, 3))
    fused, (h,), _ = coupled_parallel_scan([a], [bx])
    assert np.array_equal(fused, associative_scan(a, bx))
    assert np.max(np.abs(h - sequential_scan(a, bx))) <= 1e-15


def test_time_invariant_power_series():
    rng = np.random.default_rng(16)
    L = 6
    S = [np.full((1, L, 2), s) for s in (0.2, 0.15, 0.3)]
    bx = [rng.normal(size=(1, L, 2)) for _ in range(3)]
    fused, _, _ = coupled_parallel_scan(S, bx)
    P = 0.65
    U = sum(bx)
    for t in range(L):
        ref = sum(P ** (t - i) * U[:, i] for i in range(t + 1))
        assert np.max(np.abs(fused[:, t] - ref)) <= 1e-12


@given(seeds)
@settings(max_examples=40, deadline=None)
def test_parallel_matches_stepping(seed):
    rng = np.random.default_rng(seed)
    S, bx, h0, _ = random_coupled_instance(rng, Sizes(L=32, N=4, E=3, M=3))
    f_ref, h_ref = coupled_sequential_scan(S, bx, h0)
    f, h, _ = coupled_parallel_scan(S, bx, h0)
    assert np.max(np.abs(f - f_ref)) <= 1e-12
    for a, b in zip(h, h_ref):
        assert np.max(np.abs(a - b)) <= 1e-12
    # fused sum equals the sum of the per-modality states
    assert np.max(np.abs(f - sum(h))) <= 1e-12


def test_full_scan_with_uniform_pairs_matches_summed_scan():
    rng = np.random.default_rng(17)
    S, bx, h0, _ = random_coupled_instance(rng, Sizes(L=12, N=3, E=2, M=3))
    M = len(S)
    states = coupled_full_scan([[S[m] for m in range(M)] for _ in range(M)], bx, h0)
    _, ref = coupled_sequential_scan(S, bx, h0)
    for a, b in zip(states, ref):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_coupled_conv_examples():
    U = [np.zeros((1, 4, 1, 1)), np.zeros((1, 4, 1, 1))]
    U[0][0, 0] = 1.0
    S = [np.full((1, 4, 1, 1), 0.25), np.full((1, 4, 1, 1), 0.25)]
    y = coupled_conv_output(S, U, np.ones((1, 1)))
    assert np.allclose(y.ravel(), [1.0, 0.5, 0.25, 0.125], rtol=0, atol=1e-15)
    rng = np.random.default_rng(18)
    X = [rng.normal(size=(1, 5, 2, 3)) for _ in range(2)]
    Z = [np.zeros((1, 5, 2, 3))] * 2
    C = rng.normal(size=(1, 3))
    assert np.allclose(coupled_conv_output(Z, X, C), np.einsum("blen,bn->ble", X[0] + X[1], C), rtol=0, atol=1e-15)


# backward ------------------------------------------------------------------


def test_scan_backward_fd(op_grad_errors):
    assert op_grad_errors["coupled_scan"] <= 1e-4
    assert op_grad_errors["zoh"] <= 1e-4
    assert op_grad_errors["zoh_series"] <= 1e-4


def test_backward_l1_is_direct():
    rng = np.random.default_rng(19)
    a, G = rng.uniform(size=(1, 1, 3)), rng.normal(size=(1, 1, 3))
    _, dX, dh0 = scan_backward([a], np.zeros((1, 1, 3)), [G])
    assert np.array_equal(dX[0], G)
    assert np.array_equal(dh0, a[:, 0] * G[:, 0])


def test_backward_memoryless_does_not_propagate():
    G = np.random.default_rng(20).normal(size=(2, 5, 3))
    _, dX, dh0 = scan_backward([np.zeros_like(G)], np.zeros_like(G), [G])
    assert np.array_equal(dX[0], G)
    assert not dh0.any()


def test_backward_engines_agree():
    rng = np.random.default_rng(21)
    S, bx, h0, _ = random_coupled_instance(rng, Sizes(L=17, N=3, E=2, M=3))
    _, _, fprev = coupled_parallel_scan(S, bx, h0)
    G = [rng.normal(size=b.shape) for b in bx]
    r1 = scan_backward(S, fprev, G, "scan")
    r2 = scan_backward(S, fprev, G, "sequential")
    for x, y in zip(r1[0] + r1[1] + [r1[2]], r2[0] + r2[1] + [r2[2]]):
        assert np.max(np.abs(x - y)) <= 1e-12
