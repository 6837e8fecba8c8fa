import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceparse import tensor_core as tc
from faceparse.errors import ConfigError, ShapeError


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-12))


def random_conv_case(rng):
    h, w = rng.integers(1, 13, 2)
    cin, cout = rng.integers(1, 5, 2)
    k = int(rng.choice([1, 3, 5]))
    x = rng.normal(size=(h, w, cin))
    kernel = rng.normal(size=(k, k, cin, cout))
    bias = rng.normal(size=cout)
    return x, kernel, bias


class TestConvExamples:
    def test_identity_kernel(self):
        x = np.arange(12.0).reshape(3, 4, 1)
        kernel = np.zeros((3, 3, 1, 1))
        kernel[1, 1] = 1.0
        np.testing.assert_array_equal(tc.conv2d_same(x, kernel, np.zeros(1)), x)

    def test_box_filter_uses_zero_padding(self):
        x = np.ones((3, 3, 1))
        out = tc.conv2d_same(x, np.ones((3, 3, 1, 1)), np.zeros(1))[:, :, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_bias_only(self):
        out = tc.conv2d_same(np.zeros((2, 5, 3)), np.zeros((5, 5, 3, 2)), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(out[..., 0], 1.5)
        np.testing.assert_array_equal(out[..., 1], -2.0)

    def test_cross_correlation_orientation(self):
        # kernel taps the right-hand neighbour: out[i, j] = x[i, j + 1]
        x = np.arange(5.0).reshape(1, 5, 1)
        kernel = np.zeros((1, 3, 1, 1))
        kernel[0, 2] = 1.0
        out = tc.conv2d_same(x, kernel, np.zeros(1))
        np.testing.assert_array_equal(out[0, :, 0], [1, 2, 3, 4, 0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            tc.conv2d_same(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)), np.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises((ConfigError, ShapeError)):
            tc.conv2d_same(np.zeros((4, 4, 2)), np.zeros((3, 3, 1, 1)), np.zeros(1))

    def test_bias_length_rejected(self):
        with pytest.raises(ConfigError):
            tc.conv2d_same(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 2)), np.zeros(3))

    def test_inputs_not_modified(self, rng):
        x, k, b = random_conv_case(rng)
        copies = [a.copy() for a in (x, k, b)]
        tc.conv2d_same(x, k, b)
        for a, c in zip((x, k, b), copies):
            np.testing.assert_array_equal(a, c)


def test_conv_matches_naive_oracle_1000_cases():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        x, k, b = random_conv_case(rng)
        worst = max(worst, rel_err(tc.conv2d_same(x, k, b), tc.conv2d_same_naive(x, k, b)))
    assert worst < 1e-6


def test_conv_backward_is_adjoint(rng):
    # <conv(x), g> is linear in x and in kernel, so the backward must be its adjoint
    for _ in range(20):
        x, k, b = random_conv_case(rng)
        g = rng.normal(size=x.shape[:2] + (k.shape[3],))
        dx, dk, db = tc.conv2d_same_backward(x, k, g)
        lin = np.sum((tc.conv2d_same(x, k, b) - b) * g)
        assert np.isclose(np.sum(dx * x), lin)
        assert np.isclose(np.sum(dk * k), lin)
        np.testing.assert_allclose(db, g.sum(axis=(0, 1)))


class TestPooling:
    def test_mean_pool_even(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        np.testing.assert_array_equal(tc.mean_pool2(x)[:, :, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_mean_pool_odd_averages_partial_windows(self):
        x = np.arange(9.0).reshape(3, 3, 1)
        out = tc.mean_pool2(x)[:, :, 0]
        np.testing.assert_allclose(out, [[2.0, 3.5], [6.5, 8.0]])

    def test_max_pool_odd_ignores_padding(self):
        x = -np.ones((3, 3, 1))
        np.testing.assert_array_equal(tc.max_pool2(x), -np.ones((2, 2, 1)))

    def test_max_pool_values(self):
        x = np.array([[1, 5, 2, 0], [3, 4, 9, 1]], dtype=float)[:, :, None]
        np.testing.assert_array_equal(tc.max_pool2(x)[:, :, 0], [[5, 9]])

    def test_argmax_first_max_wins(self):
        x = np.full((2, 2, 1), 7.0)
        assert tc.max_pool2_argmax(x)[0, 0, 0] == 0

    def test_upsample(self):
        x = np.array([[1.0, 2.0]])[:, :, None]
        np.testing.assert_array_equal(tc.upsample_nn2(x)[:, :, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


class TestMisc:
    def test_concat_order_and_mismatch(self):
        a, b = np.zeros((2, 2, 1)), np.ones((2, 2, 2))
        out = tc.concat_channels([a, b])
        assert out.shape == (2, 2, 3) and out[0, 0, 0] == 0 and out[0, 0, 2] == 1
        with pytest.raises(ShapeError):
            tc.concat_channels([a, np.zeros((3, 2, 1))])

    def test_softmax_stable_for_large_logits(self):
        x = np.array([[[1000.0, 0.0]]])
        p = tc.softmax_channels(x)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p[0, 0], [1.0, 0.0])

    def test_softmax_needs_two_channels(self):
        with pytest.raises((ShapeError, ConfigError)):
            tc.softmax_channels(np.zeros((2, 2, 1)))

    def test_flip_labels_and_tensors(self):
        lab = np.array([[1, 2, 3]])
        np.testing.assert_array_equal(tc.flip_horizontal(lab), [[3, 2, 1]])
        x = np.arange(6.0).reshape(1, 3, 2)
        np.testing.assert_array_equal(tc.flip_horizontal(x)[0, 0], x[0, 2])

    def test_as_tensor3(self):
        assert tc.as_tensor3(np.zeros((3, 4))).shape == (3, 4, 1)
        with pytest.raises(ShapeError):
            tc.as_tensor3(np.zeros(5))


# ---------------------------------------------------------------------------
# properties

dims = st.integers(1, 12)


@st.composite
def feature_maps(draw, min_c=1, max_c=4, even=False):
    h, w = draw(dims), draw(dims)
    if even:
        h, w = 2 * ((h + 1) // 2), 2 * ((w + 1) // 2)
    c = draw(st.integers(min_c, max_c))
    seed = draw(st.integers(0, 2**32 - 1))
    return np.random.default_rng(seed).normal(size=(h, w, c)) * draw(st.sampled_from([1e-3, 1.0, 50.0]))


@settings(max_examples=150)
@given(feature_maps(min_c=2, max_c=9))
def test_softmax_sums_to_one(x):
    p = tc.softmax_channels(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-6)


@settings(max_examples=150)
@given(feature_maps())
def test_maxpool_of_upsample_is_identity(x):
    np.testing.assert_array_equal(tc.max_pool2(tc.upsample_nn2(x)), x)


@settings(max_examples=150)
@given(feature_maps())
def test_meanpool_of_upsample_is_identity(x):
    np.testing.assert_allclose(tc.mean_pool2(tc.upsample_nn2(x)), x, rtol=1e-12, atol=0)


@settings(max_examples=150)
@given(feature_maps(), st.sampled_from([1, 3, 5, 7]), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_conv_preserves_spatial_shape(x, k, cout, seed):
    r = np.random.default_rng(seed)
    out = tc.conv2d_same(x, r.normal(size=(k, k, x.shape[2], cout)), r.normal(size=cout))
    assert out.shape == x.shape[:2] + (cout,)


@settings(max_examples=150)
@given(feature_maps())
def test_flip_is_involution(x):
    np.testing.assert_array_equal(tc.flip_horizontal(tc.flip_horizontal(x)), x)


@settings(max_examples=100)
@given(feature_maps(), st.integers(0, 2**32 - 1))
def test_conv_commutes_with_flip_of_mirrored_kernel(x, seed):
    r = np.random.default_rng(seed)
    k = r.normal(size=(3, 3, x.shape[2], 2))
    b = r.normal(size=2)
    lhs = tc.conv2d_same(tc.flip_horizontal(x), k[:, ::-1], b)
    np.testing.assert_allclose(lhs, tc.flip_horizontal(tc.conv2d_same(x, k, b)), atol=1e-10)


@settings(max_examples=100)
@given(feature_maps())
def test_pool_output_shape(x):
    h, w, c = x.shape
    assert tc.mean_pool2(x).shape == ((h + 1) // 2, (w + 1) // 2, c)
    assert tc.max_pool2(x).shape == ((h + 1) // 2, (w + 1) // 2, c)


@settings(max_examples=100)
@given(feature_maps(), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_conv_is_linear(x, a, b, seed):
    r = np.random.default_rng(seed)
    y = r.normal(size=x.shape)
    k = r.normal(size=(3, 3, x.shape[2], 2))
    zero = np.zeros(2)
    lhs = tc.conv2d_same(a * x + b * y, k, zero)
    rhs = a * tc.conv2d_same(x, k, zero) + b * tc.conv2d_same(y, k, zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@settings(max_examples=100)
@given(feature_maps(even=True))
def test_meanpool_preserves_global_mean(x):
    np.testing.assert_allclose(tc.mean_pool2(x).mean(axis=(0, 1)), x.mean(axis=(0, 1)),
                               rtol=1e-12, atol=1e-12 * np.abs(x).max())


@settings(max_examples=100)
@given(feature_maps(min_c=2, max_c=6), st.integers(0, 2**32 - 1))
def test_softmax_shift_invariant(x, seed):
    shift = np.random.default_rng(seed).normal(size=x.shape[:2] + (1,)) * 10
    np.testing.assert_allclose(tc.softmax_channels(x + shift), tc.softmax_channels(x), atol=1e-12)


def test_column_symmetric_is_flip_fixed_point():
    x = np.array([[1.0, 2.0, 1.0]])[:, :, None]
    np.testing.assert_array_equal(tc.flip_horizontal(x), x)
