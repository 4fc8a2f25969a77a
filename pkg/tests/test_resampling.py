import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dair.resampling import (KernelField, adaptive_resample, adaptive_resample_asp, delta_field, resample_backward,
                             validate_intervals)
from dair.tensor import PrecisionMode, StructuralError, Tensor, backward, grad_check, mul, nearest_upsample, precision, tensor_sum
from oracles import resample_naive, tap_counts


def field_of(values, f, s):
    return KernelField(Tensor(values), f, s)


def test_delta_field_is_bit_exact_identity():
    src = np.random.default_rng(0).random((2, 1, 9, 7)).astype(np.float32)
    for f in (1, 3, 5):
        out = adaptive_resample(Tensor(src), delta_field(2, 9, 7, f, 2))
        assert out.data.tobytes() == src.tobytes()


def test_constant_source_factorises():
    rng = np.random.default_rng(1)
    k = rng.standard_normal((1, 9, 6, 6))
    with precision(PrecisionMode.CHECK):
        out = adaptive_resample(Tensor(np.full((1, 1, 6, 6), 0.3)), field_of(k, 3, 2)).data
    assert np.allclose(out[0, 0], 0.3 * k[0].sum(axis=0), rtol=1e-12, atol=1e-14)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    src, k = rng.random((1, 1, 6, 6)), rng.standard_normal((1, 9, 6, 6))
    with precision(PrecisionMode.CHECK):
        got = adaptive_resample(Tensor(src), field_of(k, 3, 2)).data
    assert np.allclose(got, resample_naive(src, k, 3, (2,)), rtol=1e-6, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(4, 12), w=st.integers(4, 12), f=st.sampled_from([3, 5]), s=st.integers(1, 4),
       seed=st.integers(0, 2 ** 31))
def test_oracle_property(h, w, f, s, seed):
    rng = np.random.default_rng(seed)
    src, k = rng.random((1, 1, h, w)), rng.standard_normal((1, f * f, h, w))
    with precision(PrecisionMode.CHECK):
        got = adaptive_resample(Tensor(src), field_of(k, f, s)).data
        asp = adaptive_resample_asp(Tensor(src), field_of(k, f, s), (s, 2 * s)).data
    assert np.allclose(got, resample_naive(src, k, f, (s,)), rtol=1e-6, atol=1e-12)
    assert np.allclose(asp, resample_naive(src, k, f, (s, 2 * s)), rtol=1e-6, atol=1e-12)


def test_asp_oracle_two_intervals():
    rng = np.random.default_rng(3)
    src, k = rng.random((2, 1, 10, 9)), rng.standard_normal((2, 9, 10, 9))
    with precision(PrecisionMode.CHECK):
        got = adaptive_resample_asp(Tensor(src), field_of(k, 3, 2), (2, 4)).data
    assert np.allclose(got, resample_naive(src, k, 3, (2, 4)), rtol=1e-6, atol=1e-12)


def test_asp_single_interval_is_bitwise_plain():
    rng = np.random.default_rng(4)
    src, k = rng.random((1, 1, 8, 8)), rng.standard_normal((1, 25, 8, 8))
    a = adaptive_resample(Tensor(src), field_of(k, 5, 3)).data
    b = adaptive_resample_asp(Tensor(src), field_of(k, 5, 3), (3,)).data
    assert a.tobytes() == b.tobytes()


def test_asp_constant_source():
    k = np.random.default_rng(5).standard_normal((1, 9, 7, 7))
    with precision(PrecisionMode.CHECK):
        out = adaptive_resample_asp(Tensor(np.full((1, 1, 7, 7), 0.5)), field_of(k, 3, 2), (2, 4, 6)).data
    assert np.allclose(out[0, 0], 3 * 0.5 * k[0].sum(axis=0))


def test_asp_unshared_uses_one_block_per_interval():
    rng = np.random.default_rng(6)
    src, k = rng.random((1, 1, 8, 8)), rng.standard_normal((1, 18, 8, 8))
    with precision(PrecisionMode.CHECK):
        got = adaptive_resample_asp(Tensor(src), field_of(k, 3, 2), (2, 4), shared=False).data
    want = resample_naive(src, k[:, :9], 3, (2,)) + resample_naive(src, k[:, 9:], 3, (4,))
    assert np.allclose(got, want, rtol=1e-6, atol=1e-12)


def test_interval_validation():
    with pytest.raises(StructuralError):
        validate_intervals([])
    with pytest.raises(StructuralError):
        validate_intervals([2, 2])
    with pytest.raises(StructuralError):
        validate_intervals([4, 2])
    src, k = Tensor(np.zeros((1, 1, 4, 4))), field_of(np.zeros((1, 9, 4, 4)), 3, 1)
    with pytest.raises(StructuralError):
        adaptive_resample_asp(src, k, [])


def test_structural_errors():
    with pytest.raises(StructuralError):
        KernelField(Tensor(np.zeros((1, 16, 4, 4))), 4, 2)
    with pytest.raises(StructuralError):
        adaptive_resample(Tensor(np.zeros((1, 1, 4, 5))), field_of(np.zeros((1, 9, 4, 4)), 3, 2))


def test_interior_equals_direct_lr_sampling():
    rng = np.random.default_rng(7)
    s, f, h, w = 2, 3, 6, 6
    lr = rng.random((1, 1, h, w))
    k = rng.standard_normal((1, f * f, h * s, w * s))
    with precision(PrecisionMode.CHECK):
        out = adaptive_resample(nearest_upsample(Tensor(lr), s), field_of(k, f, s)).data[0, 0]
    half = f // 2
    checked = 0
    for i in range(h * s):
        for j in range(w * s):
            if not (half * s <= i < h * s - half * s and half * s <= j < w * s - half * s):
                continue
            acc = 0.0
            for k1 in range(f):
                for k2 in range(f):
                    acc += k[0, k1 * f + k2, i, j] * lr[0, 0, i // s + k1 - half, j // s + k2 - half]
            assert out[i, j] == pytest.approx(acc, rel=1e-12, abs=1e-14)
            checked += 1
    assert checked > 0


def test_linearity_in_each_argument():
    rng = np.random.default_rng(8)
    src, k = rng.random((1, 1, 8, 8)), rng.standard_normal((1, 9, 8, 8))
    with precision(PrecisionMode.CHECK):
        base = adaptive_resample(Tensor(src), field_of(k, 3, 2)).data
        assert np.allclose(adaptive_resample(Tensor(2 * src), field_of(k, 3, 2)).data, 2 * base)
        assert np.allclose(adaptive_resample(Tensor(src), field_of(2 * k, 3, 2)).data, 2 * base)


# --- gradients -------------------------------------------------------------------


def test_backward_delta_field_passes_upstream():
    rng = np.random.default_rng(9)
    up = rng.standard_normal((1, 1, 6, 6))
    with precision(PrecisionMode.CHECK):
        gs, _ = resample_backward(up, Tensor(rng.random((1, 1, 6, 6))), delta_field(1, 6, 6, 3, 2, np.float64))
    assert np.array_equal(gs, up)


def test_backward_field_grad_for_constant_source():
    rng = np.random.default_rng(10)
    up = rng.standard_normal((1, 1, 7, 5))
    k = field_of(rng.standard_normal((1, 25, 7, 5)), 5, 3)
    with precision(PrecisionMode.CHECK):
        _, gk = resample_backward(up, Tensor(np.full((1, 1, 7, 5), 0.7)), k)
    assert np.allclose(gk, 0.7 * np.broadcast_to(up, gk.shape))


def test_uniform_field_source_gradient_matches_counts():
    f, s, h, w, v = 3, 2, 9, 8, 0.25
    src = Tensor(np.random.default_rng(11).random((1, 1, h, w)), requires_grad=True)
    k = field_of(np.full((1, f * f, h, w), v), f, s)
    g = backward(tensor_sum(adaptive_resample(src, k)))[src]
    assert np.allclose(g[0, 0], v * tap_counts(h, w, f, s), rtol=1e-6)


def test_asp_source_gradient_matches_counts():
    f, h, w, v = 3, 10, 10, 0.5
    src = Tensor(np.random.default_rng(12).random((1, 1, h, w)), requires_grad=True)
    k = field_of(np.full((1, f * f, h, w), v), f, 2)
    g = backward(tensor_sum(adaptive_resample_asp(src, k, (2, 4))))[src]
    assert np.allclose(g[0, 0], v * (tap_counts(h, w, f, 2) + tap_counts(h, w, f, 4)), rtol=1e-6)


def _weights(shape, seed):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


@pytest.mark.parametrize("f,s", [(3, 2), (5, 1), (3, 4)])
def test_gradcheck_both_arguments(f, s):
    rng = np.random.default_rng(13)
    src, k = rng.standard_normal((1, 1, 8, 8)), rng.standard_normal((1, f * f, 8, 8))
    w = _weights((1, 1, 8, 8), 14)
    err = grad_check(lambda a, b: tensor_sum(mul(adaptive_resample(a, KernelField(b, f, s)), w)), [src, k])
    assert err < 1e-6


def test_gradcheck_asp():
    rng = np.random.default_rng(15)
    src, k = rng.standard_normal((2, 1, 9, 9)), rng.standard_normal((2, 9, 9, 9))
    w = _weights((2, 1, 9, 9), 16)
    err = grad_check(lambda a, b: tensor_sum(mul(adaptive_resample_asp(a, KernelField(b, 3, 2), (2, 4)), w)),
                     [src, k])
    assert err < 1e-5


def test_resample_backward_matches_finite_differences():
    rng = np.random.default_rng(17)
    up = rng.standard_normal((1, 1, 6, 6))
    src, k = rng.standard_normal((1, 1, 6, 6)), rng.standard_normal((1, 9, 6, 6))
    with precision(PrecisionMode.CHECK):
        gs, gk = resample_backward(up, Tensor(src), field_of(k, 3, 2))

    def loss(a, b):
        return float((resample_naive(a, b, 3, (2,)) * up).sum())

    eps = 1e-6
    for arr, grad in ((src, gs), (k, gk)):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for idx in range(0, flat.size, 7):
            old = flat[idx]
            flat[idx] = old + eps
            hi = loss(src, k)
            flat[idx] = old - eps
            lo = loss(src, k)
            flat[idx] = old
            num = (hi - lo) / (2 * eps)
            assert abs(num - gflat[idx]) / max(1e-8, abs(num) + abs(gflat[idx])) < 1e-6
