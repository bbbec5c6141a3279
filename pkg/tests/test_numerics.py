import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from merv.errors import DimensionError
from merv.numerics import (
    adaptive_avg_pool2d,
    adaptive_avg_pool3d,
    adaptive_avg_pool_backward,
    conv3d_simple,
    finite_diff_grad,
    gelu,
    layer_norm,
    linear,
    linear_backward,
    matmul,
    mean_over_axis,
    relative_error,
    softmax,
    softmax_backward,
    tensor,
)

finite = st.floats(-80, 80, allow_nan=False, width=64)


def _grid(t, h, w, d, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((t, h, w, d)).astype(dtype)


def _window(i, n, m):
    return i * n // m, -(-(i + 1) * n // m)


def naive_pool(x, t, h, w):
    T, H, W, D = x.shape
    out = np.zeros((t, h, w, D))
    for a in range(t):
        f0, f1 = _window(a, T, t)
        for b in range(h):
            r0, r1 = _window(b, H, h)
            for c in range(w):
                s0, s1 = _window(c, W, w)
                out[a, b, c] = x[f0:f1, r0:r1, s0:s1].reshape(-1, D).mean(axis=0)
    return out


# ---------------------------------------------------------------- tensor


def test_tensor_shape_and_checks():
    t = tensor(range(6), shape=(2, 3))
    assert t.shape == (2, 3) and t.dtype == np.float32 and t.flags.c_contiguous
    with pytest.raises(DimensionError):
        tensor(range(5), shape=(2, 3))
    with pytest.raises(DimensionError):
        tensor([], shape=(0,))
    with pytest.raises(ValueError):
        tensor([1.0, np.nan])
    assert np.isinf(tensor([np.inf], checked=False)[0])


# ---------------------------------------------------------------- matmul


def test_matmul_examples():
    a = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(matmul(a, [[0], [0]]), [[0], [0]])
    np.testing.assert_array_equal(matmul(a, [[5], [6]]), [[17], [39]])


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_bit_reproducible(rng):
    a = rng.standard_normal((37, 19)).astype(np.float32)
    b = rng.standard_normal((19, 23)).astype(np.float32)
    assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    m, k, n, p = r.integers(1, 6, size=4)
    a, b, c = r.standard_normal((m, k)), r.standard_normal((k, n)), r.standard_normal((n, p))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-4 * max(1.0, np.max(np.abs(left)))


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    np.testing.assert_allclose(softmax([2.5, 2.5, 2.5]), [1 / 3] * 3, rtol=1e-7)
    assert softmax([7.0])[0] == 1.0
    np.testing.assert_allclose(softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], rtol=1e-12)
    with pytest.raises(DimensionError):
        softmax(np.zeros(0))


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_simplex(v):
    p = softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-6


@given(arrays(np.float32, st.integers(1, 12), elements=st.floats(-80, 80, width=32)))
def test_softmax_simplex_float32(v):
    p = softmax(v)
    assert p.dtype == np.float32
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) <= 1e-6


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant(v, c):
    np.testing.assert_allclose(softmax(v + c), softmax(v), atol=1e-12)


def test_softmax_backward_matches_finite_differences(rng):
    v = rng.standard_normal(6)
    g = rng.standard_normal(6)
    f = lambda x: float(softmax(x) @ g)  # noqa: E731
    assert relative_error(softmax_backward(softmax(v), g), finite_diff_grad(f, v)) < 1e-4


def test_finite_diff_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones_like(x), atol=1e-9)
    np.testing.assert_allclose(finite_diff_grad(lambda y: 0.5 * np.sum(y * y), x), x, atol=1e-8)
    # softmax-then-dot against the closed-form Jacobian diag(p) - p p^T
    v, g = rng.standard_normal(5), rng.standard_normal(5)
    p = softmax(v)
    J = np.diag(p) - np.outer(p, p)
    numeric = finite_diff_grad(lambda y: float(softmax(y) @ g), v)
    assert relative_error(J @ g, numeric) < 1e-6


def test_finite_diff_coords_subset(rng):
    x = rng.standard_normal(10)
    g = finite_diff_grad(lambda y: float(np.sum(y**2)), x, coords=[2, 7])
    assert np.count_nonzero(g) == 2
    np.testing.assert_allclose(g[[2, 7]], 2 * x[[2, 7]], rtol=1e-8)


def test_relative_error_floor():
    assert relative_error([0.0], [1e-9]) == pytest.approx(1e-3)
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([], []) == 0.0


# ---------------------------------------------------------------- pooling


def test_pool2d_hand_case():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4, 1)
    out = adaptive_avg_pool2d(x, 2, 2)
    np.testing.assert_array_equal(out[0, :, :, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_pool2d_identity_and_constant(rng):
    x = rng.standard_normal((3, 5, 7, 4)).astype(np.float32)
    assert adaptive_avg_pool2d(x, 5, 7).tobytes() == x.tobytes()
    c = np.full((2, 9, 6, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(adaptive_avg_pool2d(c, 4, 5), 0.37, rtol=1e-6)


def test_pool3d_examples(rng):
    x = rng.standard_normal((4, 6, 6, 2))
    np.testing.assert_array_equal(adaptive_avg_pool3d(x, 4, 3, 3), adaptive_avg_pool2d(x, 3, 3))
    plane = rng.standard_normal((1, 5, 5, 2))
    frames = np.concatenate([plane, 3 * plane])
    np.testing.assert_allclose(adaptive_avg_pool3d(frames, 1, 5, 5), 2 * plane, rtol=1e-12)
    np.testing.assert_allclose(adaptive_avg_pool3d(np.full((6, 4, 4, 1), -2.0), 3, 2, 2), -2.0)


def test_pool_target_errors():
    x = np.zeros((2, 4, 4, 1))
    for bad in ((5, 4), (4, 5), (0, 2)):
        with pytest.raises(DimensionError):
            adaptive_avg_pool2d(x, *bad)
    with pytest.raises(DimensionError):
        adaptive_avg_pool3d(x, 3, 2, 2)
    with pytest.raises(DimensionError):
        adaptive_avg_pool2d(np.zeros((4, 4, 1)), 2, 2)


def test_pool_preserves_dtype(rng):
    for dt in (np.float32, np.float64):
        assert adaptive_avg_pool2d(_grid(2, 4, 4, 3, dtype=dt), 2, 2).dtype == dt


pool_dims = st.tuples(
    st.integers(1, 5), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4)
).flatmap(
    lambda s: st.tuples(
        st.just(s), st.integers(1, s[0]), st.integers(1, s[1]), st.integers(1, s[2]), st.integers(0, 999)
    )
)


@given(pool_dims)
def test_pool_matches_window_rule(case):
    (T, H, W, D), t, h, w, seed = case
    x = _grid(T, H, W, D, seed)
    np.testing.assert_allclose(adaptive_avg_pool3d(x, t, h, w), naive_pool(x, t, h, w), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 999))
def test_pool_divisible_preserves_mean(h, w, kh, kw, seed):
    x = _grid(2, h * kh, w * kw, 3, seed)
    out = adaptive_avg_pool2d(x, h, w)
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), x.mean(axis=(0, 1, 2)), rtol=1e-10, atol=1e-12)


@given(pool_dims)
def test_pool_backward_is_adjoint(case):
    (T, H, W, D), t, h, w, seed = case
    x = _grid(T, H, W, D, seed)
    g = _grid(t, h, w, D, seed + 1)
    lhs = np.sum(adaptive_avg_pool3d(x, t, h, w) * g)
    rhs = np.sum(x * adaptive_avg_pool_backward(g, x.shape))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_pool_backward_matches_finite_differences(rng):
    x = rng.standard_normal((3, 5, 4, 2))
    g = rng.standard_normal((2, 3, 3, 2))
    f = lambda y: float(np.sum(adaptive_avg_pool3d(y, 2, 3, 3) * g))  # noqa: E731
    assert relative_error(adaptive_avg_pool_backward(g, x.shape), finite_diff_grad(f, x)) < 1e-4


@given(st.integers(0, 999))
def test_pool2d_frame_permutation_equivariant(seed):
    x = _grid(5, 6, 6, 2, seed)
    perm = np.random.default_rng(seed).permutation(5)
    np.testing.assert_array_equal(adaptive_avg_pool2d(x[perm], 3, 2), adaptive_avg_pool2d(x, 3, 2)[perm])


# ---------------------------------------------------------------- reductions and linear


def test_mean_over_axis(rng):
    assert mean_over_axis(np.ones((1, 3)), 0).shape == (3,)
    assert mean_over_axis(np.array([1.0, 3.0]), 0) == 2.0
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(mean_over_axis(x, 0), x.sum(axis=0) / 5, rtol=1e-12)


def test_linear_examples(rng):
    x = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(linear(x, np.eye(4)), x)
    np.testing.assert_array_equal(linear(x, np.zeros((4, 2))), np.zeros((2, 3, 2)))
    np.testing.assert_array_equal(linear(x, np.zeros((4, 2)), np.array([1.0, -1.0]))[1, 2], [1.0, -1.0])
    assert linear(np.array([[2.0, 3.0]]), np.array([[4.0], [5.0]]))[0, 0] == 23.0
    with pytest.raises(DimensionError):
        linear(x, np.eye(3))


def test_linear_backward_matches_finite_differences(rng):
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    g = rng.standard_normal((3, 2))
    gx, gw, gb = linear_backward(x, W, g)
    assert relative_error(gx, finite_diff_grad(lambda y: np.sum(linear(y, W, b) * g), x)) < 1e-4
    assert relative_error(gw, finite_diff_grad(lambda y: np.sum(linear(x, y, b) * g), W)) < 1e-4
    assert relative_error(gb, finite_diff_grad(lambda y: np.sum(linear(x, W, y) * g), b)) < 1e-4


# ---------------------------------------------------------------- conv


def naive_conv(x, k, pads):
    xp = np.pad(x, (*pads, (0, 0)))
    kt, kh, kw = k.shape[:3]
    T, H, W = (xp.shape[i] - k.shape[i] + 1 for i in range(3))
    out = np.zeros((T, H, W, k.shape[4]))
    for a in range(T):
        for b in range(H):
            for c in range(W):
                win = xp[a : a + kt, b : b + kh, c : c + kw]
                out[a, b, c] = np.einsum("ijkc,ijkcd->d", win, k)
    return out


def test_conv_identity_and_ones(rng):
    x = rng.standard_normal((3, 4, 5, 2))
    ident = np.eye(2).reshape(1, 1, 1, 2, 2)
    np.testing.assert_allclose(conv3d_simple(x, ident), x, rtol=1e-12)
    c = np.full((3, 4, 4, 1), 1.5)
    out = conv3d_simple(c, np.ones((2, 3, 3, 1, 1)))
    np.testing.assert_allclose(out, 1.5 * 18)
    assert out.shape == (2, 2, 2, 1)


def test_conv_spatial_hand_case():
    x = np.arange(1.0, 10.0).reshape(1, 3, 3, 1)
    k = np.ones((1, 2, 2, 1, 1))
    np.testing.assert_array_equal(conv3d_simple(x, k)[0, :, :, 0], [[12, 16], [24, 28]])


@given(st.integers(0, 999), st.sampled_from([0, 1, ((0, 1), (1, 1), (1, 1))]))
def test_conv_matches_sliding_window(seed, padding):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 4, 4, 2))
    k = r.standard_normal((2, 3, 3, 2, 3))
    pads = ((padding,) * 2,) * 3 if isinstance(padding, int) else padding
    np.testing.assert_allclose(conv3d_simple(x, k, padding=padding), naive_conv(x, k, pads), rtol=1e-10, atol=1e-10)


def test_conv_stride_and_errors(rng):
    x = rng.standard_normal((4, 6, 6, 2))
    k = rng.standard_normal((2, 2, 2, 2, 1))
    np.testing.assert_allclose(conv3d_simple(x, k, stride=2), naive_conv(x, k, ((0, 0),) * 3)[::2, ::2, ::2])
    with pytest.raises(DimensionError):
        conv3d_simple(x, rng.standard_normal((2, 2, 2, 3, 1)))
    with pytest.raises(DimensionError):
        conv3d_simple(x[:1], k)


# ---------------------------------------------------------------- nonlinearities


def test_layer_norm_and_gelu(rng):
    x = rng.standard_normal((4, 8)) * 3 + 1
    y = layer_norm(x, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1, rtol=1e-4)
    assert gelu(np.array([0.0]))[0] == 0.0
    np.testing.assert_allclose(gelu(np.array([10.0, -10.0])), [10.0, 0.0], atol=1e-6)
    torch = pytest.importorskip("torch")
    v = rng.standard_normal(50)
    ref = torch.nn.functional.gelu(torch.as_tensor(v), approximate="tanh").numpy()
    np.testing.assert_allclose(gelu(v), ref, rtol=1e-12, atol=1e-12)
