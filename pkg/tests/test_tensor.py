import numpy as np
import numpy.testing as npt
import pytest

from errors import CorruptionError, DimensionError
from tensor import PoolIndexMap, conv2d_full, conv2d_kernel_grad, conv2d_valid, flip2, maxpool2d, unpool2d


def naive_conv(x, k, b):
    maps, channels, h1, h2 = k.shape
    _, height, width = x.shape
    out = np.zeros((maps, height - h1 + 1, width - h2 + 1))
    for m in range(maps):
        for r in range(out.shape[1]):
            for c in range(out.shape[2]):
                out[m, r, c] = np.sum(x[:, r:r + h1, c:c + h2] * k[m]) + b[m]
    return out


def test_conv_hand_computed():
    x = np.arange(9, dtype=float).reshape(1, 3, 3)
    k = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
    out = conv2d_valid(x, k, np.array([0.5]))
    npt.assert_array_equal(out, [[[-3.5, -3.5], [-3.5, -3.5]]])


def test_conv_matches_loops(rng):
    for _ in range(5):
        x = rng.normal(size=(3, 9, 7))
        k = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        npt.assert_allclose(conv2d_valid(x, k, b), naive_conv(x, k, b), atol=1e-12)


def test_conv_batch_equals_per_item(rng):
    x = rng.normal(size=(5, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    batched = conv2d_valid(x, k)
    for i in range(5):
        npt.assert_allclose(batched[i], conv2d_valid(x[i], k), atol=1e-12)


def test_full_conv_restores_shape_and_is_adjoint(rng):
    x = rng.normal(size=(2, 3, 10, 8))
    k = rng.normal(size=(4, 3, 5, 3))
    y = rng.normal(size=(2, 4, 6, 6))
    forward = conv2d_valid(x, k)
    assert forward.shape == y.shape
    back = conv2d_full(y, k)
    assert back.shape == x.shape
    npt.assert_allclose(np.sum(forward * y), np.sum(x * back), rtol=1e-10)


def test_kernel_grad_matches_definition(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 2, 2))
    g = rng.normal(size=(2, 3, 4, 4))
    analytic = conv2d_kernel_grad(x, g, k.shape)
    expected = np.zeros_like(k)
    for idx in np.ndindex(k.shape):
        basis = np.zeros_like(k)
        basis[idx] = 1.0
        expected[idx] = np.sum(conv2d_valid(x, basis) * g)
    npt.assert_allclose(analytic, expected, atol=1e-10)


@pytest.mark.parametrize(
    "x_shape,k_shape,axis",
    [((2, 5, 5), (1, 3, 2, 2), "channel"), ((1, 2, 5), (1, 1, 3, 3), "row"), ((1, 5, 2), (1, 1, 2, 3), "column")],
)
def test_conv_dimension_errors_name_axis(x_shape, k_shape, axis):
    with pytest.raises(DimensionError, match=axis):
        conv2d_valid(np.zeros(x_shape), np.zeros(k_shape))


def test_maxpool_first_maximum_wins_ties():
    x = np.array([[[1.0, 1.0], [1.0, 0.0]]])
    pooled, index_map = maxpool2d(x, (2, 2))
    npt.assert_array_equal(pooled, [[[1.0]]])
    assert (index_map.rows[0, 0, 0], index_map.cols[0, 0, 0]) == (0, 0)


def test_maxpool_ragged_extent_rejected():
    with pytest.raises(DimensionError, match="row"):
        maxpool2d(np.zeros((1, 5, 4)), (2, 2))


def test_unpool_of_pool_keeps_only_window_maxima(rng):
    for _ in range(1000):
        x = rng.random((2, 3, 4, 6))
        pooled, index_map = maxpool2d(x, (2, 2))
        restored = unpool2d(pooled, index_map, x.shape)
        # Every window keeps exactly its maximum, everything else is zero.
        pooled_again, _ = maxpool2d(restored, (2, 2))
        npt.assert_array_equal(pooled_again, pooled)
        assert np.count_nonzero(restored) == pooled.size
        npt.assert_array_equal(restored[restored != 0], x[restored != 0])


def test_unpool_out_of_range_index_is_corruption():
    pooled, index_map = maxpool2d(np.ones((1, 2, 2)), (2, 2))
    bad = PoolIndexMap(shape=index_map.shape, rows=index_map.rows + 5, cols=index_map.cols, pool=(2, 2))
    with pytest.raises(CorruptionError):
        unpool2d(pooled, bad, (1, 2, 2))


def test_flip2_reverses_spatial_axes():
    k = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    npt.assert_array_equal(flip2(k)[0, 0], [[3.0, 2.0], [1.0, 0.0]])
    npt.assert_array_equal(flip2(flip2(k)), k)


def test_conv_and_pool_match_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(2, 3, 12, 12))
    k = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)
    expected = torch.nn.functional.conv2d(torch.from_numpy(x), torch.from_numpy(k), torch.from_numpy(b)).numpy()
    ours = conv2d_valid(x, k, b)
    npt.assert_allclose(ours, expected, atol=1e-10)

    pooled, _ = maxpool2d(ours, (2, 2))
    expected_pool = torch.nn.functional.max_pool2d(torch.from_numpy(ours), 2).numpy()
    npt.assert_allclose(pooled, expected_pool, atol=0)

    transposed = torch.nn.functional.conv_transpose2d(torch.from_numpy(ours), torch.from_numpy(k)).numpy()
    npt.assert_allclose(conv2d_full(ours, k), transposed, atol=1e-9)


def test_conv_is_linear_in_inputs_and_kernels(rng):
    for _ in range(20):
        x1, x2 = rng.normal(size=(2, 2, 7, 6))
        k1, k2 = rng.normal(size=(2, 3, 2, 3, 2))
        a, b = rng.normal(size=2)
        npt.assert_allclose(conv2d_valid(a * x1 + b * x2, k1), a * conv2d_valid(x1, k1) + b * conv2d_valid(x2, k1),
                            atol=1e-12)
        npt.assert_allclose(conv2d_valid(x1, a * k1 + b * k2), a * conv2d_valid(x1, k1) + b * conv2d_valid(x1, k2),
                            atol=1e-12)


def brute_force_pool(x, p1, p2):
    channels, height, width = x.shape
    out = np.empty((channels, height // p1, width // p2))
    for c in range(channels):
        for r in range(out.shape[1]):
            for s in range(out.shape[2]):
                out[c, r, s] = max(x[c, r * p1 + i, s * p2 + j] for i in range(p1) for j in range(p2))
    return out


def test_maxpool_matches_per_window_max(rng):
    for _ in range(200):
        p1, p2 = rng.integers(1, 5, size=2)
        channels = rng.integers(1, 4)
        height = p1 * rng.integers(1, 8 // p1 + 1)
        width = p2 * rng.integers(1, 8 // p2 + 1)
        x = rng.normal(size=(channels, height, width))
        pooled, _ = maxpool2d(x, (p1, p2))
        npt.assert_array_equal(pooled, brute_force_pool(x, p1, p2))


def test_pool_backward_conserves_gradient_sum(rng):
    for _ in range(100):
        x = rng.normal(size=(3, 3, 8, 8))
        pooled, index_map = maxpool2d(x, (2, 2))
        grad = rng.normal(size=pooled.shape)
        routed = unpool2d(grad, index_map, x.shape)
        assert routed.sum() == pytest.approx(grad.sum(), abs=1e-10)
        assert np.count_nonzero(routed) == np.count_nonzero(grad)
