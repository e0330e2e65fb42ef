import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from procanet.errors import ShapeError
from procanet.tensor import (
    ConvKernel,
    activation,
    conv2d_fast,
    conv2d_naive,
    elementwise,
    matmul,
    maxpool2x2,
    set_num_threads,
    sigmoid,
    upsample_nearest2x,
)


def identity_kernel(c):
    w = np.zeros((c, c, 3, 3), np.float32)
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    return ConvKernel(w, np.zeros(c, np.float32))


@pytest.mark.parametrize("conv", [conv2d_naive, conv2d_fast])
def test_all_ones_kernel_counts_neighbours(conv):
    x = np.ones((1, 1, 3, 3), np.float32)
    k = ConvKernel(np.ones((1, 1, 3, 3)), np.zeros(1))
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], np.float32)
    npt.assert_array_equal(conv(x, k)[0, 0], expected)


@pytest.mark.parametrize("conv", [conv2d_naive, conv2d_fast])
def test_identity_kernel_and_zero_input(conv):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    npt.assert_array_equal(conv(x, identity_kernel(3)), x)
    k = ConvKernel(rng.standard_normal((4, 3, 3, 3)), np.array([1.5, -2, 0, 3]))
    y = conv(np.zeros_like(x), k)
    npt.assert_array_equal(y, np.broadcast_to(k.bias[None, :, None, None], y.shape))


def test_one_by_one_kernel_is_per_pixel_channel_map():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
    k = ConvKernel(rng.standard_normal((3, 5, 1, 1)), rng.standard_normal(3))
    expected = np.einsum("oc,nchw->nohw", k.weight[:, :, 0, 0].astype(np.float64), x) \
        + k.bias[None, :, None, None]
    assert k.padding == 0
    npt.assert_allclose(conv2d_fast(x, k), expected, atol=1e-5)


def test_fast_matches_naive_on_spec_shape():
    rng = np.random.default_rng(2)
    x = rng.uniform(-10, 10, (2, 8, 16, 16)).astype(np.float32)
    k = ConvKernel(rng.uniform(-1, 1, (16, 8, 3, 3)), rng.uniform(-1, 1, 16))
    assert np.max(np.abs(conv2d_fast(x, k) - conv2d_naive(x, k))) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 2), cin=st.integers(1, 8),
       cout=st.integers(1, 8), h=st.integers(1, 12), w=st.integers(1, 12),
       size=st.sampled_from([1, 3]))
def test_fast_matches_naive_property(seed, n, cin, cout, h, w, size):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-10, 10, (n, cin, h, w)).astype(np.float32)
    k = ConvKernel(rng.uniform(-1, 1, (cout, cin, size, size)), rng.uniform(-1, 1, cout))
    assert np.max(np.abs(conv2d_fast(x, k) - conv2d_naive(x, k))) < 1e-5


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_conv_is_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (1, 3, 6, 6)).astype(np.float32)
    y = rng.uniform(-1, 1, (1, 3, 6, 6)).astype(np.float32)
    k = ConvKernel(rng.uniform(-1, 1, (2, 3, 3, 3)), np.zeros(2))
    lhs = conv2d_fast((alpha * x + beta * y).astype(np.float32), k)
    rhs = alpha * conv2d_fast(x, k) + beta * conv2d_fast(y, k)
    npt.assert_allclose(lhs, rhs, atol=1e-4)


def test_conv_channel_mismatch_names_both_shapes():
    k = ConvKernel(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(1, 4, 5, 5\).*\(2, 3, 3, 3\)"):
        conv2d_fast(np.zeros((1, 4, 5, 5), np.float32), k)


@pytest.mark.parametrize("weight,padding", [((2, 3, 5, 5), None), ((2, 3, 3, 3), 0),
                                            ((2, 3, 1, 1), 1), ((2, 3, 3, 2), None)])
def test_kernel_rejects_unsupported_geometry(weight, padding):
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros(weight), np.zeros(2), padding)


def test_bitwise_identical_across_thread_counts():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 32, 32)).astype(np.float32)
    k = ConvKernel(rng.standard_normal((16, 8, 3, 3)), rng.standard_normal(16))
    try:
        set_num_threads(1)
        one = conv2d_fast(x, k)
        set_num_threads(0)
        many = conv2d_fast(x, k)
    finally:
        set_num_threads(0)
    assert one.tobytes() == many.tobytes()
    assert conv2d_fast(x, k).tobytes() == many.tobytes()


def test_matmul_examples():
    npt.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])
    b = np.arange(6, dtype=np.float32).reshape(2, 3)
    npt.assert_array_equal(matmul(np.eye(2), b), b)
    npt.assert_array_equal(matmul(np.zeros((4, 2)), b), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_maxpool_examples():
    out, idx = maxpool2x2(np.array([[[[1, 2], [3, 4]]]], np.float32))
    assert out[0, 0, 0, 0] == 4 and idx[0, 0, 0, 0] == 3
    ramp = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    npt.assert_array_equal(maxpool2x2(ramp)[0][0, 0], [[5, 7], [13, 15]])
    out, idx = maxpool2x2(np.full((1, 2, 4, 4), 7.0, np.float32))
    assert np.all(out == 7) and np.all(idx == 0)
    with pytest.raises(ShapeError):
        maxpool2x2(np.zeros((1, 1, 3, 4), np.float32))


def test_upsample_replicates_blocks():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    npt.assert_array_equal(upsample_nearest2x(x)[0, 0], expected)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 9), w=st.integers(1, 9))
def test_pool_after_upsample_is_identity(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w)).astype(np.float32)
    npt.assert_array_equal(maxpool2x2(upsample_nearest2x(x))[0], x)


def test_elementwise_examples():
    x = np.random.default_rng(4).standard_normal((1, 2, 3, 3)).astype(np.float32)
    npt.assert_array_equal(elementwise("mul", x, np.ones_like(x)), x)
    npt.assert_array_equal(elementwise("add", x, np.zeros_like(x)), x)
    a = np.array([2, 3], np.float32).reshape(1, 1, 1, 2)
    b = np.array([4, 5], np.float32).reshape(1, 1, 1, 2)
    npt.assert_array_equal(elementwise("mul", a, b).ravel(), [8, 15])
    with pytest.raises(ShapeError):
        elementwise("add", a, x)
    with pytest.raises(ValueError):
        elementwise("sub", a, b)


def test_activation_examples():
    assert activation("sigmoid", np.zeros((1, 1, 1, 1)))[0, 0, 0, 0] == 0.5
    assert activation("sigmoid", np.full((1, 1, 1, 1), 2.0))[0, 0, 0, 0] == pytest.approx(0.880797, abs=1e-6)
    npt.assert_array_equal(activation("relu", np.array([-3.0, 3.0]).reshape(1, 1, 1, 2)).ravel(), [0, 3])


def test_sigmoid_strictly_inside_unit_interval_and_monotone():
    x = np.random.default_rng(5).uniform(-1e4, 1e4, 2000)
    x = np.sort(np.concatenate([[-1e30, -100, -20, 20, 100, 1e30], x])).astype(np.float32)
    y = sigmoid(x.reshape(1, 1, 1, -1)).ravel()
    assert np.all((y > 0) & (y < 1))
    assert np.all(np.diff(y) >= 0)
    assert np.all(np.isfinite(y))
