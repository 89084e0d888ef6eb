import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expnet import ops
from expnet.gradcheck import check_gradients
from expnet.tensor import Tensor, backward


def leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


# conv2d ----------------------------------------------------------------------


def test_conv_all_ones():
    out = ops.conv2d(np.ones((3, 3, 1)), np.ones((2, 2, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.data, np.full((2, 2, 1), 4.0))


def test_conv_identity_kernel_bit_exact():
    x = np.random.default_rng(0).normal(size=(5, 4, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    out = ops.conv2d(x, w, np.zeros(3))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 0), (7, 3, 2, 1), (6, 2, 3, 2), (5, 5, 1, 0)])
def test_conv_output_extent(h, k, s, p):
    out = ops.conv2d(np.zeros((h, h + 1, 2)), np.zeros((k, k, 2, 3)), np.zeros(3), s, p)
    assert out.shape == ((h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1, 3)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ValueError, match="channel axis"):
        ops.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


def test_conv_kernel_too_tall_names_axis():
    with pytest.raises(ValueError, match="height"):
        ops.conv2d(np.zeros((2, 6, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))


def test_conv_gradient_oracle():
    rng = np.random.default_rng(1)
    x, w, b = leaf(rng, (5, 5, 2)), leaf(rng, (3, 3, 2, 3)), leaf(rng, (3,))
    r = rng.normal(size=(3, 3, 3))
    err = check_gradients(lambda: ops.sum(ops.conv2d(x, w, b) * r), [x, w, b])
    assert err <= 1e-6


# deformable ----------------------------------------------------------------


def test_deformable_zero_offsets_equals_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 6, 3))
    w, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    ref = ops.conv2d(x, w, b, 1, 1).data
    out = ops.deformable_conv2d(x, w, b, np.zeros((3, 3, 3, 18)), np.zeros(18), 1, 1).data
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_deformable_doubles_channels():
    c = 3
    out = ops.deformable_conv2d(np.ones((8, 8, c)), np.ones((3, 3, c, 2 * c)), np.zeros(2 * c),
                                np.zeros((3, 3, c, 18)), np.zeros(18), 1, 1)
    assert out.shape == (8, 8, 2 * c)


def test_deformable_far_offsets_sample_zeros():
    x = np.ones((1, 4, 4, 1))
    ob = np.full(18, 100.0)  # every tap lands far outside the input
    out = ops.deformable_conv2d(x, np.ones((3, 3, 1, 1)), np.zeros(1),
                                np.zeros((3, 3, 1, 18)), ob, 1, 1)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4, 4, 1)))


def test_deformable_offset_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng, (1, 5, 5, 2))
    w, b = leaf(rng, (3, 3, 2, 2), 0.5), leaf(rng, (2,))
    ow, ob = leaf(rng, (3, 3, 2, 18), 0.3), leaf(rng, (18,), 0.5)
    r = rng.normal(size=(1, 5, 5, 2))
    fn = lambda: ops.sum(ops.deformable_conv2d(x, w, b, ow, ob, 1, 1) * r)
    assert check_gradients(fn, [ow, ob], eps=1e-6) <= 1e-5


# pooling -----------------------------------------------------------------


def test_max_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert ops.max_pool2d(x, 2, 2).data.item() == 4.0
    np.testing.assert_array_equal(ops.max_pool2d(np.full((8, 8, 2), 3.0)).data, np.full((4, 4, 2), 3.0))


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.zeros((1, 2, 2, 1)), requires_grad=True)
    backward(ops.sum(ops.max_pool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, ..., 0], [[1.0, 0.0], [0.0, 0.0]])


def test_patch_average_pool_examples():
    np.testing.assert_array_equal(ops.patch_average_pool(np.full((6, 6, 2), 5.0), 3).data,
                                  np.full((2, 2, 2), 5.0))
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    assert ops.patch_average_pool(x, 2).data.item() == 2.5
    assert ops.patch_average_pool(np.zeros((8, 8, 3)), 2).shape == (4, 4, 3)


def test_patch_average_pool_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        ops.patch_average_pool(np.zeros((6, 6, 1)), 4)


def test_global_average_pool():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
    np.testing.assert_array_equal(ops.global_average_pool(x).data, [2.5])
    np.testing.assert_array_equal(ops.global_average_pool(np.full((3, 3, 2), 7.0)).data, [7.0, 7.0])
    t = Tensor(np.zeros((3, 5, 2)), requires_grad=True)
    backward(ops.sum(ops.global_average_pool(t)))
    np.testing.assert_allclose(t.grad, np.full((3, 5, 2), 1 / 15))


# sine --------------------------------------------------------------------


def test_sine_annihilators():
    x = np.random.default_rng(4).normal(size=10)
    np.testing.assert_array_equal(ops.elementwise_sine(x, 0.0, 3.0).data, np.zeros(10))
    np.testing.assert_array_equal(ops.elementwise_sine(x, 2.0, 0.0).data, np.zeros(10))


def test_sine_peak():
    out = ops.elementwise_sine(np.array([1.0, 0.0]), 2.0, np.pi / 2)
    assert out.data[0] == pytest.approx(2.0, abs=1e-15)


# softmax family --------------------------------------------------------------


def test_softmax_constant_vector():
    np.testing.assert_allclose(ops.softmax(np.full(7, 3.3)).data, np.full(7, 1 / 7))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, shift):
    a = ops.softmax(x, axis=-1).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(x + shift, axis=-1).data, a, atol=1e-6)


def test_sigmoid_open_interval():
    s = ops.sigmoid(np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])).data
    assert np.all(s > 0) and np.all(s < 1)


def test_cross_entropy_uniform_and_saturated():
    assert ops.cross_entropy(np.zeros(10), 3).item() == pytest.approx(np.log(10), abs=1e-12)
    logits = np.zeros(5)
    logits[2] = 30.0
    assert ops.cross_entropy(logits, 2).item() <= 1e-12


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="out of range"):
        ops.cross_entropy(np.zeros(3), 3)


def test_masked_softmax_ignores_masked_entries():
    x = np.array([[1.0, 5.0, 2.0]])
    out = ops.masked_softmax(x, np.array([[1.0, 0.0, 1.0]])).data
    ref = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    np.testing.assert_allclose(out[0, [0, 2]], ref)
    assert out[0, 1] == 0.0


def test_layer_normalize_moments():
    y = ops.layer_normalize(np.random.default_rng(5).normal(size=(4, 32)) * 3 + 1).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-4)


def test_matmul_batched_gradient():
    rng = np.random.default_rng(6)
    a, b = leaf(rng, (2, 3, 4)), leaf(rng, (4, 5))
    r = rng.normal(size=(2, 3, 5))
    assert check_gradients(lambda: ops.sum(ops.matmul(a, b) * r), [a, b]) <= 1e-8


def test_straight_through_forward_and_backward():
    x = Tensor(np.array([0.2, 0.7]), requires_grad=True)
    y = ops.straight_through(x, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(y.data, [0.0, 1.0])
    backward(ops.sum(y * np.array([3.0, 5.0])))
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_forward_backward_bit_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x, w, b = leaf(rng, (2, 6, 6, 3)), leaf(rng, (3, 3, 3, 4)), leaf(rng, (4,))
        y = ops.sum(ops.max_pool2d(ops.relu(ops.conv2d(x, w, b, 1, 1))))
        backward(y)
        return y.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
