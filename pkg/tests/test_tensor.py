import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dvnet import tensor as T
from gradcheck import check


def t64(a, grad=True):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def vec(values):
    """(1, 1, n) tensor from a 1-D list."""
    return T.Tensor(np.asarray(values, dtype=np.float64).reshape(1, 1, -1))


# --- conv_nd -------------------------------------------------------------


def test_conv_hand_example():
    out = T.conv_nd(vec([1, 2, 3]), vec([1, 0, -1]), stride=1, padding=1)
    np.testing.assert_array_equal(out.data.ravel(), [-2, -2, 2])


def test_conv_is_cross_correlation_not_convolution():
    out = T.conv_nd(vec([0, 1, 0]), vec([1, 2, 3]), padding=1)
    # a flipped kernel would give [1, 2, 3]
    np.testing.assert_array_equal(out.data.ravel(), [3, 2, 1])


def test_conv_strided_padded_matches_reference_values():
    # values computed once with an independent reference implementation
    x = T.Tensor(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
    w = T.Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    out = T.conv_nd(x, w, stride=2, padding=1)
    np.testing.assert_array_equal(out.data[0, 0], [[111, 217], [363, 573]])


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_conv_identity_kernel(values):
    out = T.conv_nd(vec(values), vec([0, 1, 0]), padding=1)
    np.testing.assert_array_equal(out.data.ravel(), values)


@pytest.mark.parametrize("rank", [1, 2, 3])
@pytest.mark.parametrize("n,k,stride,padding", [(7, 3, 1, 1), (8, 3, 2, 1), (6, 1, 1, 0), (9, 2, 3, 0)])
def test_conv_output_extent(rank, n, k, stride, padding):
    x = T.Tensor(np.zeros((1, 2) + (n,) * rank))
    w = T.Tensor(np.zeros((3, 2) + (k,) * rank))
    out = T.conv_nd(x, w, stride=stride, padding=padding)
    assert out.shape == (1, 3) + ((n + 2 * padding - k) // stride + 1,) * rank


def test_conv_rejects_channel_mismatch_naming_axis():
    x = T.Tensor(np.zeros((1, 2, 5, 5)))
    w = T.Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError, match="axis"):
        T.conv_nd(x, w)


def test_conv_rejects_rank_mismatch():
    with pytest.raises(ValueError, match="rank"):
        T.conv_nd(T.Tensor(np.zeros((1, 1, 5, 5))), T.Tensor(np.zeros((1, 1, 3))))


def test_conv_kernel_gradient_matches_finite_differences_on_4cube(rng):
    x = t64(rng.standard_normal((1, 1, 4, 4, 4)), grad=False)
    w = t64(rng.standard_normal((2, 1, 3, 3, 3)))
    worst = check(lambda: T.sum_all(T.conv_nd(x, w, padding=1)), [w], eps=1e-4, rtol=1e-3, samples=54)
    assert worst < 1e-3


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_all_gradients(rng, stride, padding):
    x = t64(rng.standard_normal((2, 3, 6, 5)))
    w = t64(rng.standard_normal((4, 3, 3, 3)))
    b = t64(rng.standard_normal(4))
    y = rng.standard_normal(T.conv_nd(x, w, b, stride, padding).shape)
    check(lambda: T.sum_all(T.mul(T.conv_nd(x, w, b, stride, padding), T.Tensor(y))), [x, w, b])


def test_pointwise_conv_gradients(rng):
    x = t64(rng.standard_normal((2, 5, 3, 3, 3)))
    w = t64(rng.standard_normal((4, 5, 1, 1, 1)))
    y = T.Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
    check(lambda: T.sum_all(T.mul(T.conv_nd(x, w), y)), [x, w])


# --- conv_transpose_nd ---------------------------------------------------


def test_conv_transpose_single_placement():
    out = T.conv_transpose_nd(vec([5]), vec([1, 2, 3]), stride=2, padding=0)
    np.testing.assert_array_equal(out.data.ravel(), [5, 10, 15])


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)))
def test_conv_transpose_unit_kernel_is_identity(values):
    out = T.conv_transpose_nd(vec(values), vec([1]), stride=1, padding=0)
    np.testing.assert_array_equal(out.data.ravel(), values)


@pytest.mark.parametrize("rank", [1, 2, 3])
def test_upsampling_rule_doubles_extent(rank):
    padding, output_padding = T.upsample_padding(3, 2)
    x = T.Tensor(np.zeros((1, 2) + (8,) * rank))
    w = T.Tensor(np.zeros((2, 3) + (3,) * rank))
    out = T.conv_transpose_nd(x, w, stride=2, padding=padding, output_padding=output_padding)
    assert out.shape == (1, 3) + (16,) * rank


def test_conv_transpose_matches_reference_values():
    x = T.Tensor(np.arange(1, 5, dtype=np.float64).reshape(1, 1, 2, 2))
    w = T.Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    out = T.conv_transpose_nd(x, w, stride=2, padding=1, output_padding=1)
    expect = [[5, 14, 10, 12], [14, 36, 24, 30], [15, 34, 20, 24], [24, 55, 32, 36]]
    np.testing.assert_array_equal(out.data[0, 0], expect)


@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.sampled_from([1, 3]),
    st.integers(0, 1),
    st.integers(0, 2**31 - 1),
)
def test_conv_transpose_is_adjoint_of_conv(rank, stride, k, padding, seed):
    rng = np.random.default_rng(seed)
    n = 5 + stride
    x = rng.standard_normal((2, 3) + (n,) * rank)
    w = rng.standard_normal((4, 3) + (k,) * rank)
    cx = T.conv_nd(T.Tensor(x), T.Tensor(w), stride=stride, padding=padding)
    y = rng.standard_normal(cx.shape)
    # output_padding recovers the extent that strided conv floored away
    op = (n + 2 * padding - k) % stride
    ty = T.conv_transpose_nd(T.Tensor(y), T.Tensor(w), stride=stride, padding=padding, output_padding=op)
    assert ty.shape == x.shape
    lhs, rhs = np.vdot(cx.data, y), np.vdot(x, ty.data)
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_conv_transpose_gradients(rng):
    x = t64(rng.standard_normal((2, 3, 3, 4)))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    b = t64(rng.standard_normal(2))
    y = T.Tensor(rng.standard_normal((2, 2, 6, 8)))
    check(lambda: T.sum_all(T.mul(T.conv_transpose_nd(x, w, b, 2, 1, 1), y)), [x, w, b])


def test_conv_transpose_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="axis"):
        T.conv_transpose_nd(T.Tensor(np.zeros((1, 2, 4))), T.Tensor(np.zeros((3, 1, 3))))


# --- batch_norm ----------------------------------------------------------


def _bn(x, scale=1.0, shift=0.0, training=True, stats=None):
    c = x.shape[1]
    return T.batch_norm(
        T.Tensor(np.asarray(x, dtype=np.float64)),
        T.Tensor(np.full(c, scale)),
        T.Tensor(np.full(c, shift)),
        training,
        stats,
    )


def test_batch_norm_constant_input_is_zero():
    out = _bn(np.full((2, 1, 3, 3), 7.0))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batch_norm_two_values():
    out = _bn(np.array([1.0, 3.0]).reshape(1, 1, 2))
    np.testing.assert_allclose(out.data.ravel(), [-1, 1], atol=1e-3)


def test_batch_norm_affine():
    out = _bn(np.array([1.0, 3.0]).reshape(1, 1, 2), scale=2.0, shift=5.0)
    np.testing.assert_allclose(out.data.ravel(), [3, 7], atol=2e-3)


def test_batch_norm_eval_before_train_rejected():
    with pytest.raises(RuntimeError, match="uninitialised"):
        _bn(np.ones((1, 1, 2)), training=False, stats=T.RunningStats.zeros(1))


def test_batch_norm_running_statistics(rng):
    stats = T.RunningStats.zeros(2, np.float64)
    a = rng.standard_normal((2, 2, 4)) + 3.0
    b = rng.standard_normal((2, 2, 4)) - 1.0
    _bn(a, stats=stats)
    np.testing.assert_allclose(stats.mean, a.mean(axis=(0, 2)))
    np.testing.assert_allclose(stats.var, a.var(axis=(0, 2), ddof=1))
    _bn(b, stats=stats)
    np.testing.assert_allclose(stats.mean, 0.9 * a.mean(axis=(0, 2)) + 0.1 * b.mean(axis=(0, 2)))
    out = _bn(b, training=False, stats=stats)
    expect = (b - stats.mean[None, :, None]) / np.sqrt(stats.var[None, :, None] + T.BN_EPS)
    np.testing.assert_allclose(out.data, expect)


def test_batch_norm_rejects_wrong_scale_extent():
    with pytest.raises(ValueError, match="channels"):
        T.batch_norm(T.Tensor(np.ones((1, 3, 2))), T.Tensor(np.ones(2)), T.Tensor(np.ones(2)), True)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(rng, training):
    x = t64(rng.standard_normal((2, 3, 4, 3)))
    s = t64(rng.standard_normal(3))
    h = t64(rng.standard_normal(3))
    y = T.Tensor(rng.standard_normal(x.shape))
    stats = T.RunningStats.zeros(3, np.float64)
    _bn(rng.standard_normal((2, 3, 4, 3)), stats=stats)
    frozen = T.RunningStats(stats.mean.copy(), stats.var.copy(), True, momentum=1.0)
    check(lambda: T.sum_all(T.mul(T.batch_norm(x, s, h, training, frozen), y)), [x, s, h])


# --- pooling -------------------------------------------------------------


def test_avg_pool_example():
    np.testing.assert_array_equal(T.avg_pool_nd(vec([1, 3, 5, 7]), 2, 2).data.ravel(), [2, 6])


@given(st.integers(1, 3), st.floats(-100, 100))
def test_avg_pool_constant(rank, value):
    out = T.avg_pool_nd(T.Tensor(np.full((1, 2) + (4,) * rank, value)), 2, 2)
    assert out.shape == (1, 2) + (2,) * rank
    np.testing.assert_allclose(out.data, value, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("rank", [1, 2, 3])
def test_avg_pool_gradient_is_inverse_window_volume(rank, rng):
    x = t64(rng.standard_normal((1, 2) + (4,) * rank))
    check(lambda: T.sum_all(T.avg_pool_nd(x, 2, 2)), [x])
    np.testing.assert_allclose(x.grad, 1.0 / 2**rank)


def test_avg_pool_rejects_indivisible_extent():
    with pytest.raises(ValueError, match="divisible"):
        T.avg_pool_nd(vec([1, 2, 3]), 2, 2)


def test_avg_pool_overlapping_windows(rng):
    x = t64(rng.standard_normal((1, 1, 6, 6)))
    out = T.avg_pool_nd(x, 3, 1)
    assert out.shape == (1, 1, 4, 4)
    assert np.isclose(out.data[0, 0, 1, 2], x.data[0, 0, 1:4, 2:5].mean())
    y = T.Tensor(rng.standard_normal(out.shape))
    check(lambda: T.sum_all(T.mul(T.avg_pool_nd(x, 3, 1), y)), [x])


# --- channel ops ---------------------------------------------------------


def test_concat_depths():
    a = T.Tensor(np.zeros((1, 64, 2, 2, 2)))
    assert T.concat_channels(a, a).channels == 128


def test_concat_with_empty_is_identity(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 4)))
    out = T.concat_channels(x, T.Tensor(np.zeros((2, 0, 4))))
    np.testing.assert_array_equal(out.data, x.data)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_concat_then_slice_recovers_parts(ca, cb, seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.standard_normal((2, ca, 3, 2)))
    b = T.Tensor(rng.standard_normal((2, cb, 3, 2)))
    ab = T.concat_channels(a, b)
    assert np.array_equal(T.slice_channels(ab, 0, ca).data, a.data)
    assert np.array_equal(T.slice_channels(ab, ca, ca + cb).data, b.data)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ValueError, match="axis 3"):
        T.concat_channels(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 4, 5))))


def test_concat_and_slice_gradients(rng):
    a = t64(rng.standard_normal((2, 2, 3)))
    b = t64(rng.standard_normal((2, 3, 3)))
    y = T.Tensor(rng.standard_normal((2, 3, 3)))
    check(lambda: T.sum_all(T.mul(T.slice_channels(T.concat_channels(a, b), 1, 4), y)), [a, b])


def test_softmax_equal_logits():
    p = T.softmax_channels(T.Tensor(np.zeros((1, 3, 2))))
    np.testing.assert_allclose(p.data, 1 / 3)


def test_softmax_closed_form():
    p = T.softmax_channels(T.Tensor(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1)))
    np.testing.assert_allclose(p.data.ravel(), [0.25, 0.75], rtol=1e-12)


@given(
    arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(2, 5), st.integers(1, 4)), elements=st.floats(-300, 300)),
    st.floats(-50, 50),
)
def test_softmax_simplex_and_shift_invariance(logits, shift):
    p = T.softmax_channels(T.Tensor(logits)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    q = T.softmax_channels(T.Tensor(logits + shift)).data
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_softmax_gradient(rng):
    x = t64(rng.standard_normal((2, 4, 3, 3)))
    y = T.Tensor(rng.standard_normal(x.shape))
    check(lambda: T.sum_all(T.mul(T.softmax_channels(x), y)), [x])


# --- elementwise ---------------------------------------------------------


@pytest.mark.parametrize(
    "op,binary",
    [
        (lambda a, b: T.add(a, b), True),
        (lambda a, b: T.mul(a, b), True),
        (lambda a, b: T.scale(a, -2.5), False),
        (lambda a, b: T.relu(a), False),
        (lambda a, b: T.log(T.mul(a, a)), False),
        (lambda a, b: T.mean_all(T.mul(a, b)), True),
    ],
    ids=["add", "mul", "scale", "relu", "log", "mean"],
)
def test_elementwise_gradients(op, binary, rng):
    a = t64(rng.standard_normal((2, 2, 5)) + 0.05)
    b = t64(rng.standard_normal((2, 2, 5)))
    check(lambda: T.sum_all(op(a, b)), [a, b] if binary else [a])


def test_dropout_inverted_scaling_and_gradient(rng):
    x = t64(np.ones((1, 1, 10000)))
    out = T.dropout(x, 0.25, np.random.default_rng(0))
    kept = out.data != 0
    np.testing.assert_allclose(out.data[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02
    assert T.dropout(x, 0.25, rng, training=False) is x
    z = t64(rng.standard_normal((1, 2, 6)))
    check(lambda: T.sum_all(T.dropout(z, 0.3, np.random.default_rng(7))), [z])


# --- backward ------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = t64(rng.standard_normal((2, 3, 4)))
    g = T.Graph()
    with T.recording(g):
        loss = T.sum_all(x)
    T.backward(g, loss)
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_relu_gate(rng):
    x = t64(rng.standard_normal((1, 1, 50)))
    g = T.Graph()
    with T.recording(g):
        loss = T.sum_all(T.relu(x))
    T.backward(g, loss)
    assert (x.grad[x.data < 0] == 0).all()
    assert (x.grad[x.data > 0] == 1).all()


def test_backward_accumulates_until_reset(rng):
    x = t64(rng.standard_normal((1, 1, 4)))
    for _ in range(2):
        g = T.Graph()
        with T.recording(g):
            loss = T.sum_all(T.scale(x, 3.0))
        T.backward(g, loss)
    np.testing.assert_array_equal(x.grad, 6.0)
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = t64(np.ones((1, 1, 3)))
    g = T.Graph()
    with T.recording(g):
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(g, y)


def test_backward_walks_tape_in_reverse(rng):
    x = t64(rng.standard_normal((1, 2, 4)))
    g = T.Graph()
    with T.recording(g):
        h = T.relu(T.scale(x, 2.0))
        loss = T.sum_all(T.mul(h, h))
    order = []
    for node in g.nodes:
        fn = node.backward

        def spy(grad, fn=fn, op=node.op):
            order.append(op)
            return fn(grad)

        node.backward = spy
    T.backward(g, loss)
    assert order == [n.op for n in reversed(g.nodes)]
    assert x.grad.shape == x.shape


def test_no_grad_records_nothing(rng):
    x = t64(rng.standard_normal((1, 1, 4)))
    g = T.Graph()
    with T.recording(g), T.no_grad():
        T.relu(x)
    assert len(g) == 0


def test_shared_input_gradients_add(rng):
    x = t64(rng.standard_normal((1, 1, 5)))
    check(lambda: T.sum_all(T.add(T.mul(x, x), T.scale(x, 3.0))), [x])
